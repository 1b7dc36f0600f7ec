//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 8 are exact properties and fail the process when they
//! do not hold. Criteria 6 and 7 are statistical claims about the toy
//! benchmark; their lines report the measured outcome either way and only
//! fail the process under `ACCEPTANCE_STRICT=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use detalign::verify::{self, CheckOutcome};
use detalign_cli::config::RunConfig;
use detalign_cli::run::{self, AblationReport};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Check = Box<dyn Fn() -> detalign::Result<CheckOutcome>>;

struct Line {
    id: u8,
    passed: bool,
    exact: bool,
    text: String,
}

fn from_check(id: u8, o: CheckOutcome, budget: Option<Duration>) -> Line {
    let in_time = budget.is_none_or(|b| o.elapsed < b);
    let limit = budget.map_or(String::new(), |b| format!(" (limit {b:?})"));
    Line {
        id,
        passed: o.passed && in_time,
        exact: true,
        text: format!("{}: {} in {:.2?}{limit}", o.name, o.detail, o.elapsed),
    }
}

fn benchmark_config() -> Result<RunConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.cfg");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::parse(&text)?)
}

fn ablation_lines(report: &AblationReport) -> (Line, Line) {
    let orderings = report.orderings();
    let failed: Vec<&str> = orderings.iter().filter(|o| !o.holds).map(|o| o.label.as_str()).collect();
    let in_time = report.seconds < 3600.0;
    let means: Vec<String> = run::VARIANTS
        .iter()
        .map(|v| format!("{} {:.3}", v.name, report.map50(v.name).mean))
        .collect();
    let six = Line {
        id: 6,
        passed: failed.is_empty() && in_time,
        exact: false,
        text: format!(
            "mean target mAP50 [{}]; {}/{} orderings hold{}; {:.0} s",
            means.join(", "),
            orderings.len() - failed.len(),
            orderings.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join("; ")) },
            report.seconds
        ),
    };
    let (a80, s80) = (report.ratio("oaa+ota", 0.8).mean, report.ratio("source-only", 0.8).mean);
    let (a90, s90) = (report.ratio("oaa+ota", 0.9).mean, report.ratio("source-only", 0.9).mean);
    let seven = Line {
        id: 7,
        passed: a80 >= s80 && a90 >= s90,
        exact: false,
        text: format!("mAP80/mAP50 adapted {a80:.4} vs source {s80:.4}; mAP90/mAP50 adapted {a90:.4} vs source {s90:.4}"),
    };
    (six, seven)
}

fn run_dir_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
        // wall-clock timings differ by nature and config.txt names its own directory
        if name == run::TIMINGS_FILE || name == "config.txt" {
            continue;
        }
        files.push((PathBuf::from(name), fs::read(&p)?));
    }
    files.sort();
    Ok(files)
}

fn reproducibility() -> Result<Line> {
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut outputs = Vec::new();
    for d in &dirs {
        let mut c = RunConfig::default();
        for (k, v) in [("steps", "120"), ("pretrain_steps", "40"), ("refresh_every", "16"), ("eval_every", "40"), ("checkpoint_every", "40")] {
            c.set(k, v)?;
        }
        c.out_dir = d.path().to_path_buf();
        run::run_train(&c, None)?;
        outputs.push(run_dir_bytes(d.path())?);
    }
    let same = outputs[0] == outputs[1];
    let names: Vec<String> = outputs[0].iter().map(|(p, _)| p.display().to_string()).collect();
    let checkpoints = names.iter().filter(|n| n.ends_with(".daal")).count();
    Ok(Line {
        id: 8,
        passed: same && checkpoints >= 3 && names.iter().any(|n| n == run::METRICS_FILE),
        exact: true,
        text: format!("two 120-step runs, {} files compared ({checkpoints} checkpoints): {}", names.len(), if same { "byte-identical" } else { "differ" }),
    })
}

fn print(line: &Line) {
    let tag = if line.passed { "PASS" } else { "FAIL" };
    println!("criterion {} {tag} {}", line.id, line.text);
}

fn main() -> ExitCode {
    // `cargo test -- --list` and similar probes expect a quick answer
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines = Vec::new();
    let mut record = |l: Line| {
        print(&l);
        lines.push(l);
    };
    let exact: [(u8, Check, Option<Duration>); 5] = [
        (1, Box::new(|| verify::ot_oracle(1000, 0)), Some(Duration::from_secs(30))),
        (2, Box::new(|| verify::gradient_suite(100, 0)), Some(Duration::from_secs(120))),
        (3, Box::new(|| verify::swd_properties(10_000, 0)), None),
        (4, Box::new(|| verify::mask_oracle(1000, 100, 0)), None),
        (5, Box::new(|| verify::degenerate_equivalence(100, 0)), None),
    ];
    for (id, check, budget) in exact {
        record(match check() {
            Ok(o) => from_check(id, o, budget),
            Err(e) => Line {
                id,
                passed: false,
                exact: true,
                text: format!("error: {e}"),
            },
        });
    }

    let started = Instant::now();
    match benchmark_config().and_then(|cfg| run::run_ablation(&cfg, &SEEDS, |l| eprintln!("  {l}"))) {
        Ok(report) => {
            eprint!("{}", report.summary());
            let (six, seven) = ablation_lines(&report);
            record(six);
            record(seven);
        }
        Err(e) => {
            for id in [6, 7] {
                record(Line {
                    id,
                    passed: false,
                    exact: false,
                    text: format!("ablation error after {:.0?}: {e:#}", started.elapsed()),
                });
            }
        }
    }

    record(reproducibility().unwrap_or_else(|e| Line {
        id: 8,
        passed: false,
        exact: true,
        text: format!("error: {e:#}"),
    }));

    let passed = lines.iter().filter(|l| l.passed).count();
    let fatal = lines.iter().any(|l| !l.passed && (l.exact || strict));
    println!("{passed}/{} criteria pass", lines.len());
    if lines.iter().any(|l| !l.passed && !l.exact) && !strict {
        println!("statistical criteria are reported, not enforced; set ACCEPTANCE_STRICT=1 to enforce them");
    }
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
