use std::path::Path;
use std::process::{Command, Output};

use un2clip_core::io::config::RunConfig;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.size = 120;
    cfg.clip.epochs = 1;
    cfg.clip.arch.dim = 16;
    cfg.clip.arch.patch = 8;
    cfg.clip.arch.mlp_hidden = 32;
    cfg.diffusion.epochs = 1;
    cfg.diffusion.arch.channels = [4, 8, 8];
    cfg.diffusion.arch.cond_dim = 8;
    cfg.diffusion.arch.embed_dim = 16;
    cfg.diffusion.schedule.steps = 20;
    cfg.diffusion.schedule.beta_max = 0.3;
    cfg.finetune.epochs = 1;
    cfg.finetune.diagnostic_images = 8;
    cfg.finetune.banks = 2;
    cfg.eval.pairs_per_family = 3;
    cfg
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.toml"), tiny().to_toml()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_un2clip"))
            .env("UN2CLIP_OUT", self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let w = Workspace::new();
    let bad = w.run(&["--no-such-flag"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert_eq!(code(&w.run(&["frobnicate"])), 2);
    assert_eq!(code(&w.run(&[])), 2);
    assert_eq!(code(&w.run(&["--help"])), 0);
    assert_eq!(code(&w.run(&["sample", "--mode", "sideways"])), 2);
}

#[test]
fn gen_data_writes_corpus() {
    let w = Workspace::new();
    w.ok(&["gen-data", "--seed", "7", "--out", "corpus.bin"]);
    assert!(w.path("corpus.bin").exists());
}

#[test]
fn missing_config_is_initialised_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_un2clip"))
        .env("UN2CLIP_OUT", dir.path())
        .args(["corpus", "inspect", "--scene", "0", "--out", "x.ppm"])
        .output()
        .unwrap();
    // No corpus yet: a runtime failure, but the config was written first.
    assert_eq!(code(&out), 1);
    let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn unknown_config_key_is_a_runtime_error() {
    let w = Workspace::new();
    let text = tiny().to_toml() + "\n[extra]\nkey = 1\n";
    std::fs::write(w.path("bad.toml"), text).unwrap();
    let out = w.run(&["--config", "bad.toml", "gen-data"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn corpus_inspect_prints_attributes_and_exports_ppm() {
    let w = Workspace::new();
    w.ok(&["gen-data", "--seed", "3"]);
    let text = w.ok(&["corpus", "inspect", "--scene", "5", "--out", "s5.ppm"]);
    assert!(text.contains("scene_id: 5"));
    assert!(text.contains("caption: "));
    let bytes = std::fs::read(w.path("s5.ppm")).unwrap();
    assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(bytes.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);
    assert_eq!(
        code(&w.run(&["corpus", "inspect", "--scene", "99999", "--out", "x.ppm"])),
        1
    );
}

fn trained(w: &Workspace) {
    w.ok(&["--seed", "3", "gen-data"]);
    w.ok(&["--seed", "3", "train-clip"]);
    w.ok(&["--seed", "3", "train-unclip"]);
}

#[test]
fn stage_commands_chain_and_stamp_provenance() {
    let w = Workspace::new();
    trained(&w);
    let csv = w.ok(&[
        "--seed",
        "3",
        "finetune",
        "--mode",
        "default",
        "--out-dir",
        "ft",
    ]);
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with("# config_hash=") && first.ends_with(" seed=3"));
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "epoch,mode,diagnostic_loss,drift,checkpoint"
    );
    assert_eq!(csv.lines().count(), 4);
    assert!(w.path("ft/default/epoch1.ck").exists());

    let diag: f64 = w.ok(&["--seed", "3", "diagnose"]).trim().parse().unwrap();
    let diag_ft: f64 = w
        .ok(&["--seed", "3", "diagnose", "--clip", "ft/default/epoch0.ck"])
        .trim()
        .parse()
        .unwrap();
    assert_eq!(diag, diag_ft);
    assert!(csv.contains(&format!("0,default,{diag:.6}")));

    w.ok(&["--seed", "3", "sample", "--count", "2", "--out", "s.ppm"]);
    assert!(std::fs::read(w.path("s.ppm"))
        .unwrap()
        .starts_with(b"P6\n64 64\n"));

    w.ok(&["eval-blind", "--out", "blind.json"]);
    w.ok(&[
        "eval-dense",
        "--model",
        "ft/default/epoch1.ck",
        "--out",
        "dense.json",
    ]);
    w.ok(&["eval-zeroshot", "--name", "orig", "--out", "zs.json"]);
    let table = w.ok(&["report", "blind.json", "dense.json", "zs.json"]);
    assert!(table.starts_with("model"));
    assert!(table.contains("clip") && table.contains("epoch1") && table.contains("orig"));
    let report = std::fs::read_to_string(w.path("report.csv")).unwrap();
    assert!(report.starts_with("# config_hash="));
    assert_eq!(
        report.lines().nth(1).unwrap(),
        "schema_version,model,metric,kind,value"
    );
}

#[test]
fn wrong_checkpoint_kind_is_rejected() {
    let w = Workspace::new();
    trained(&w);
    let out = w.run(&["eval-zeroshot", "--model", "unclip.ck", "--out", "x.json"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(
        err.contains("denoiser") && err.contains("expected clip"),
        "{err}"
    );
}

#[test]
fn report_refuses_mixed_corpora() {
    let w = Workspace::new();
    trained(&w);
    w.ok(&["eval-zeroshot", "--out", "a.json"]);
    w.ok(&["--seed", "4", "gen-data", "--out", "other.bin"]);
    w.ok(&["eval-zeroshot", "--corpus", "other.bin", "--out", "b.json"]);
    let out = w.run(&["report", "a.json", "b.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different corpora"));
}

#[test]
fn pipeline_writes_every_artifact() {
    let w = Workspace::new();
    w.ok(&["--seed", "7", "pipeline"]);
    let dir = w.path("pipeline-7");
    for f in [
        "corpus.bin",
        "clip.ck",
        "unclip.ck",
        "metrics.csv",
        "metrics.json",
        "report.txt",
        "report.csv",
        "samples.ppm",
        "segmentation.ppm",
        "finetune/default/epoch1.ck",
        "finetune/projector_random/epoch1.projector.ck",
        "finetune/update_g/epoch1.ck",
    ] {
        assert!(Path::new(&dir.join(f)).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 4 * 2);
}
