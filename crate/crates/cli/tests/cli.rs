use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn decipher(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decipher"))
        .args(args)
        .env("DA_THREADS", "1")
        .output()
        .expect("spawn decipher")
}

fn ok(args: &[&str]) -> String {
    let out = decipher(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_contents(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn codebook_reports_capacity_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.dacb");
    let b = dir.path().join("b.dacb");
    let stdout = ok(&["codebook", "--n", "2000", "--seed", "3", "--out", s(&a)]);
    let cap = stdout.lines().find(|l| l.starts_with("capacity")).unwrap();
    assert!(cap.ends_with("1.881e40"), "{cap}");
    ok(&["codebook", "--n", "2000", "--seed", "3", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let out = decipher(&["codebook", "--n", "11", "--spec", "5:2", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn cluster_command() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = decipher(&["cluster", "--data", s(&missing), "--k", "2", "--out", s(&dir.path().join("c.dacl"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset not found"));

    let file = dir.path().join("one.dacl");
    let stdout = ok(&[
        "cluster", "--dataset", "synthetic", "--n-items", "20", "--k", "1", "--out", s(&file),
    ]);
    assert!(stdout.contains("cluster\t0\t20"), "{stdout}");
    let bytes = fs::read(&file).unwrap();
    assert_eq!(&bytes[..4], b"DACL");
    assert_eq!(bytes.len(), 12 + 3072 * 4 + 20 * 2);

    // clustered codebook from the cluster file
    let cb = dir.path().join("cb.dacb");
    ok(&["codebook", "--n", "20", "--spec", "8:2,8:2", "--clusters", s(&file), "--out", s(&cb)]);
    let out = decipher(&["codebook", "--n", "21", "--spec", "8:2,8:2", "--clusters", s(&file), "--out", s(&cb)]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "dataset = synthetic\n\
         n_items = 8\n\
         codebook = {cb}\n\
         out_dir = {out}\n\
         model = gradcheck\n\
         distance = mse\n\
         batch_size = 4\n\
         epochs_phase1 = 2\n\
         epochs_phase2 = 2\n\
         wd_warmup_epochs = 2\n\
         ema_decay = 0.9\n\
         checkpoint_every = 1\n\
         {extra}",
        cb = s(&dir.join("cb.dacb")),
        out = s(&dir.join("run")),
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_sample_reconstruct_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "");

    // no codebook yet
    let out = decipher(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));

    ok(&["codebook", "--n", "8", "--spec", "8:2,8:2", "--out", s(&dir.join("cb.dacb"))]);
    let stdout = ok(&["train", "--config", s(&cfg)]);
    assert!(stdout.contains("completed\ttrue"), "{stdout}");
    let run = dir.join("run");
    let final_ck = run.join("final.dawt");
    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.lines().all(|l| l.split('\t').count() == 5));
    assert!(run.join("manifest.txt").exists());

    // resume from the epoch-2 checkpoint reproduces the final checkpoint
    let reference = fs::read(&final_ck).unwrap();
    let mid = dir.join("mid.dawt");
    fs::copy(run.join("epoch-000002.dawt"), &mid).unwrap();
    ok(&["train", "--config", s(&cfg), "--resume", s(&mid)]);
    assert_eq!(fs::read(&final_ck).unwrap(), reference);

    let (a, b) = (dir.join("sa"), dir.join("sb"));
    for d in [&a, &b] {
        ok(&["sample", "--checkpoint", s(&final_ck), "--count", "6", "--seed", "1", "--out", s(d)]);
    }
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(ca, cb);
    assert!(ca.iter().any(|(p, _)| p == Path::new("images/000005.png")));
    assert!(ca.iter().any(|(p, _)| p == Path::new("grid.png")));
    let diversity = fs::read_to_string(a.join("diversity.tsv")).unwrap();
    assert_eq!(diversity.lines().filter(|l| !l.starts_with('#')).count(), 6);

    let rec = dir.join("rec");
    let stdout = ok(&["reconstruct", "--checkpoint", s(&final_ck), "--indices", "0..8", "--out", s(&rec)]);
    assert!(stdout.lines().any(|l| l.starts_with("mean\t")), "{stdout}");
    assert_eq!(fs::read_to_string(rec.join("psnr.tsv")).unwrap().lines().count(), 10);
    let out = decipher(&["reconstruct", "--checkpoint", s(&final_ck), "--indices", "8", "--out", s(&rec)]);
    assert_eq!(out.status.code(), Some(2));

    let stdout = ok(&["eval", "--checkpoint", s(&final_ck), "--out", s(&dir.join("eval"))]);
    assert!(stdout.contains("evaluated\t8"), "{stdout}");

    let mut bad = reference.clone();
    bad[..4].copy_from_slice(b"NOPE");
    let bad_path = dir.join("bad.dawt");
    fs::write(&bad_path, bad).unwrap();
    let out = decipher(&["sample", "--checkpoint", s(&bad_path), "--out", s(&dir.join("x"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint format"));
}

#[test]
fn malformed_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "learnin_rate = 0.1\n");
    let out = decipher(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnin_rate"));
}

#[test]
fn help_lists_every_command() {
    let stdout = ok(&["--help"]);
    for cmd in ["cluster", "codebook", "train", "sample", "reconstruct", "eval"] {
        assert!(stdout.contains(cmd), "{cmd}");
    }
}
