//! End-to-end tests of the `slick` binary: real process spawns, real exit
//! codes, real files.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use slick::attest;

fn slick_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slick"))
}

fn write(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const WIRE: &str = "
    src :: FromTestDevice(synth, 1000, 128);
    w :: Wire;
    out :: ToTestDevice(sink, nocapture);
    src -> w -> out;
";

#[test]
fn run_reports_stats_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "wire.slick", WIRE);
    let stats_path = dir.path().join("stats.json");
    let out = slick_bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--stats-json")
        .arg(&stats_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats_path).unwrap()).unwrap();
    assert_eq!(stats["rx"], 1000);
    assert_eq!(stats["tx"], 1000);
    assert_eq!(stats["drops"], 0);
    assert_eq!(stats["error"], serde_json::Value::Null);
}

#[test]
fn malformed_config_exits_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.slick", "src :: ;\n");
    let out = slick_bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("bad.slick"), "{}", stderr_of(&out));
}

#[test]
fn secondary_without_primary_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sec.slick",
        "
        rxr :: DPDKRing(lonely, rx);
        out :: ToTestDevice(sink);
        rxr -> out;
        ",
    );
    let out = slick_bin()
        .args(["run", "--role", "secondary", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("is the primary running"));
}

#[test]
fn chained_configs_run_in_one_process() {
    let dir = tempfile::tempdir().unwrap();
    let primary = write(
        dir.path(),
        "first.slick",
        "
        src :: FromTestDevice(synth, 2000, 128);
        te :: ToEnclave;
        s :: Seal(sa_cli_chain);
        tx :: DPDKRing(clichain, tx, 256);
        src -> te -> s -> tx;
        ",
    );
    let secondary = write(
        dir.path(),
        "second.slick",
        "
        rx :: DPDKRing(clichain, rx, 256);
        u :: Unseal(sa_cli_chain);
        out :: ToTestDevice(sink, nocapture);
        rx -> u -> out;
        ",
    );
    let stats_path = dir.path().join("stats.json");
    let out = slick_bin()
        .args(["run", "--config"])
        .arg(&primary)
        .arg("--config")
        .arg(&secondary)
        .arg("--stats-json")
        .arg(&stats_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stats: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&stats_path).unwrap()).unwrap();
    assert_eq!(stats.len(), 2);
    assert_eq!(stats[0]["rx"], 2000);
    let delivered = stats[1]["rx"].as_u64().unwrap();
    let dropped = stats[0]["drops"].as_u64().unwrap();
    assert_eq!(delivered + dropped, 2000);
    assert_eq!(stats[1]["rejects_total"], 0);
}

#[test]
fn measure_depends_on_graph_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.slick", WIRE);
    let run = |extra: &[&str]| {
        let out = slick_bin()
            .args(["measure", "--config"])
            .arg(&cfg)
            .args(extra)
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap().trim().to_string()
    };
    let base = run(&[]);
    assert_eq!(base.len(), 64);
    assert!(base.bytes().all(|b| b.is_ascii_hexdigit()));
    assert_eq!(base, run(&[]), "measurement is deterministic");
    assert_ne!(base, run(&["--identity", "other"]));

    // Reformatting the file does not change the measurement; changing the
    // graph does.
    let cfg2 = write(
        dir.path(),
        "m2.slick",
        &format!("// a comment\n{}", WIRE.replace('\n', "\n\n")),
    );
    std::fs::rename(&cfg2, dir.path().join("m.slick")).unwrap();
    assert_eq!(base, run(&[]));
    write(dir.path(), "m.slick", &WIRE.replace("Wire", "EtherMirror"));
    assert_ne!(base, run(&[]));
}

#[test]
fn pktgen_output_replays_through_a_graph() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = dir.path().join("gen.pcap");
    let out = slick_bin()
        .args(["pktgen", "--count", "500", "--size", "100", "--out"])
        .arg(&pcap)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let cfg = write(
        dir.path(),
        "replay.slick",
        "
        src :: FromTestDevice(pcap, gen.pcap);
        c :: Counter;
        out :: ToTestDevice(sink, nocapture);
        src -> c -> out;
        ",
    );
    let stats_path = dir.path().join("stats.json");
    let out = slick_bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--stats-json")
        .arg(&stats_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats_path).unwrap()).unwrap();
    assert_eq!(stats["rx"], 500);
    assert_eq!(stats["tx"], 500);
}

#[test]
fn bench_prints_a_row_per_app() {
    let out = slick_bin()
        .args([
            "bench", "--app", "wire,ethermirror", "--sizes", "64", "--count", "2000",
            "--rounds", "1", "--json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["app"], "wire");
    assert_eq!(rows[0]["packets"], 2000);
}

#[test]
fn attested_run_provisions_or_refuses() {
    let dir = tempfile::tempdir().unwrap();
    let hw = b"cli-test-hardware".to_vec();
    let cas = attest::spawn_cas("127.0.0.1:0", hw.clone(), None).unwrap();
    let cas_addr = cas.addr().to_string();
    let cfg = write(dir.path(), "guarded.slick", WIRE);

    // Nothing installed for this measurement yet: the run must refuse to
    // start and exit with the attestation code.
    let out = slick_bin()
        .args(["run", "--cas", &cas_addr, "--config"])
        .arg(&cfg)
        .env("SLICK_HW_KEY", "cli-test-hardware")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("unknown measurement"));

    // Install policy for the exact measurement and try again.
    let m_out = slick_bin()
        .args(["measure", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    let m = String::from_utf8(m_out.stdout).unwrap().trim().to_string();
    let mut secrets = BTreeMap::new();
    secrets.insert("sa_guarded".to_string(), hex::encode([7u8; 32]));
    attest::http_put_policy(&cas_addr, &m, &secrets).unwrap();

    let out = slick_bin()
        .args(["run", "--cas", &cas_addr, "--config"])
        .arg(&cfg)
        .env("SLICK_HW_KEY", "cli-test-hardware")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let instances = attest::http_get_instances(&cas_addr).unwrap();
    assert_eq!(instances.len(), 1);
    assert_eq!(instances[0].client, "guarded");
    cas.stop();
}
