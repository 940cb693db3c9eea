//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 7, 9 and 10 drive the `dropvid` binary end to end on
//! the bundled toy clip.

#[path = "../../core/tests/shared/mod.rs"]
mod shared;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use dropvid::checkpoint::file_hash;
use dropvid::metrics::{read_csv, CsvRow};
use shared::checks::{self, Outcome};

/// Minimum masked-region PSNR margin of O_t over S_t, in dB.
const SMOKE_MARGIN_DB: f64 = 0.5;
const SMOKE_STAGE2_STEPS: u64 = 500;
const FREEZE_STEPS: u64 = 100;
const ABLATE_STEPS: u64 = 100;
const ABLATIONS: [&str; 5] = ["full", "no-mask", "no-initialnet", "no-alignment", "no-temporal"];

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn dropvid(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dropvid"));
    for a in args {
        cmd.arg(a.as_ref());
    }
    let out = cmd.output().map_err(|e| format!("spawn failed: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "dropvid {:?} exited with {}: {}",
            cmd.get_args().collect::<Vec<_>>(),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn first_row(csv: &Path) -> Result<CsvRow, String> {
    read_csv(csv).map_err(|e| e.to_string())?.into_iter().next().ok_or_else(|| format!("{} is empty", csv.display()))
}

/// Toy clip and a stage-one checkpoint shared by the pipeline criteria.
struct Fixture {
    root: PathBuf,
    toy: PathBuf,
    stage1: PathBuf,
}

fn fixture(root: &Path) -> Result<Fixture, String> {
    let toy = root.join("toy");
    dropvid(&[&"make-toy", &"--out-dir", &toy])?;
    let s1 = root.join("s1");
    dropvid(&[&"train", &"--stage", &"1", &"--config", &config("smoke_stage1.conf"), &"--data", &toy, &"--out", &s1])?;
    Ok(Fixture { root: root.to_path_buf(), toy, stage1: s1.join("stage1.ckpt") })
}

fn stage2(f: &Fixture, out: &Path, steps: u64) -> Result<(), String> {
    dropvid(&[
        &"train", &"--stage", &"2",
        &"--config", &config("smoke_stage2.conf"),
        &"--data", &f.toy,
        &"--stage1-ckpt", &f.stage1,
        &"--max-steps", &steps.to_string(),
        &"--out", &out,
    ])
}

fn freeze_contract(f: &Fixture) -> Outcome {
    let before = file_hash(&f.stage1).map_err(|e| e.to_string())?;
    let out = f.root.join("freeze");
    stage2(f, &out, FREEZE_STEPS)?;
    let after = file_hash(&f.stage1).map_err(|e| e.to_string())?;
    if before != after {
        return Err(format!("stage1.ckpt hash changed: {before} -> {after}"));
    }
    let text = std::fs::read_to_string(out.join("run_manifest.json")).map_err(|e| e.to_string())?;
    let m: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let (hb, ha) = (&m["details"]["stage1_param_hash_before"], &m["details"]["stage1_param_hash_after"]);
    if hb.is_null() || hb != ha {
        return Err(format!("in-memory stage-one parameter hash {hb} -> {ha}"));
    }
    let steps = std::fs::read_to_string(out.join("stage2_loss.jsonl")).map_err(|e| e.to_string())?.lines().count() as u64;
    if steps != FREEZE_STEPS {
        return Err(format!("ran {steps} steps, expected {FREEZE_STEPS}"));
    }
    Ok(format!("{FREEZE_STEPS} steps, file hash {} unchanged, parameter hash unchanged", &before[..12]))
}

fn end_to_end(f: &Fixture) -> Outcome {
    let s2 = f.root.join("s2");
    stage2(f, &s2, SMOKE_STAGE2_STEPS)?;
    let restored = f.root.join("restored");
    dropvid(&[
        &"infer", &"--input", &f.toy.join("rain"), &"--out", &restored,
        &"--stage1-ckpt", &f.stage1,
        &"--stage2-ckpt", &s2.join("stage2.ckpt"),
        &"--flow-ckpt", &s2.join("flow.ckpt"),
        &"--dump-intermediates",
    ])?;
    let score = |dir: PathBuf, name: &str| -> Result<CsvRow, String> {
        let csv = f.root.join("eval").join(format!("{name}.csv"));
        dropvid(&[&"eval", &"--restored", &dir, &"--gt", &f.toy.join("clean"), &"--masks", &f.toy.join("mask"), &"--out", &csv])?;
        first_row(&csv)
    };
    let o = score(restored.clone(), "stage2")?;
    let s = score(restored.join("intermediates").join("initial"), "stage1")?;
    let margin = o.masked_psnr - s.masked_psnr;
    let detail = format!(
        "masked PSNR O {:.3} vs S {:.3} (margin {margin:.3} dB), TWE O {:.3e} vs S {:.3e}",
        o.masked_psnr, s.masked_psnr, o.temporal_warp_error, s.temporal_warp_error
    );
    if !(margin >= SMOKE_MARGIN_DB) {
        return Err(format!("{detail}: margin below {SMOKE_MARGIN_DB} dB"));
    }
    if !(o.temporal_warp_error <= s.temporal_warp_error) {
        return Err(format!("{detail}: stage-two TWE exceeds stage one"));
    }
    Ok(format!("{SMOKE_STAGE2_STEPS} steps, {detail}"))
}

fn ablation_structure(f: &Fixture) -> Outcome {
    let out = f.root.join("ablate");
    dropvid(&[
        &"ablate",
        &"--config", &config("smoke_stage2.conf"),
        &"--data", &f.toy,
        &"--stage1-ckpt", &f.stage1,
        &"--max-steps", &ABLATE_STEPS.to_string(),
        &"--out", &out,
    ])?;
    let mut reports = Vec::new();
    for label in ABLATIONS {
        let p = out.join(label).join("report.csv");
        let bytes = std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        reports.push((label, bytes, first_row(&p)?));
    }
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            if reports[i].1 == reports[j].1 {
                return Err(format!("{} and {} reports are identical", reports[i].0, reports[j].0));
            }
        }
    }
    let full = reports[0].2.masked_psnr;
    let no_align = reports[3].2.masked_psnr;
    if !(no_align <= full) {
        return Err(format!("no-alignment masked PSNR {no_align:.3} exceeds full {full:.3}"));
    }
    Ok(format!(
        "{} distinct reports, masked PSNR no-alignment {no_align:.3} <= full {full:.3}",
        reports.len()
    ))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn line(n: u32, name: &str, secs: f64, outcome: &Outcome) -> String {
    match outcome {
        Ok(msg) => format!("PASS criterion {n:>2} {name}: {msg} [{secs:.1}s]"),
        Err(msg) => format!("FAIL criterion {n:>2} {name}: {msg} [{secs:.1}s]"),
    }
}

fn main() -> ExitCode {
    let library: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "deform-conv oracle", checks::deform_zero_offset_oracle),
        (2, "gradient suite", checks::gradient_suite),
        (3, "warp oracles", checks::warp_oracles),
        (4, "loss algebra", checks::loss_algebra),
        (5, "mask definition", checks::mask_definition),
        (6, "synthesizer purity", checks::synth_purity),
        (8, "metric oracles", checks::metric_oracles),
        (11, "format round-trips", checks::format_round_trips),
    ];
    let mut results = Vec::new();
    for (n, name, check) in library {
        let t = Instant::now();
        let outcome = guarded(check);
        let secs = t.elapsed().as_secs_f64();
        eprintln!("{}", line(n, name, secs, &outcome));
        results.push((n, name, secs, outcome));
    }

    let tmp = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let fx = guarded(|| fixture(tmp.path())).map_err(|e| format!("stage-one fixture: {e}"));
    eprintln!("stage-one fixture built in {:.1}s", t.elapsed().as_secs_f64());
    let pipeline: [(u32, &str, fn(&Fixture) -> Outcome); 3] = [
        (7, "freeze contract", freeze_contract),
        (9, "end-to-end smoke", end_to_end),
        (10, "ablation structure", ablation_structure),
    ];
    for (n, name, check) in pipeline {
        let t = Instant::now();
        let outcome = match &fx {
            Ok(f) => guarded(|| check(f)),
            Err(e) => Err(e.clone()),
        };
        let secs = t.elapsed().as_secs_f64();
        eprintln!("{}", line(n, name, secs, &outcome));
        results.push((n, name, secs, outcome));
    }

    results.sort_by_key(|r| r.0);
    for (n, name, secs, outcome) in &results {
        println!("{}", line(*n, name, *secs, outcome));
    }
    if results.iter().all(|r| r.3.is_ok()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
