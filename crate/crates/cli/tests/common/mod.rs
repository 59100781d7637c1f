#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::NaiveDate;
use oprisk::ingest::write_loss_csv;
use oprisk::sim::{scenario2_spec, synthetic_losses};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_oprisk"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn oprisk")
}

pub fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut a: Vec<&str> = args.to_vec();
    let o = out.to_str().unwrap();
    a.extend(["--out", o]);
    run(&a)
}

/// Seven-event-type synthetic losses over `weeks` weeks.
pub fn write_synthetic(path: &Path, weeks: usize, seed: u64) {
    let start = NaiveDate::from_ymd_opt(2010, 1, 4).unwrap();
    let recs = synthetic_losses(&scenario2_spec(), weeks, start, 0.5, seed).unwrap();
    let f = std::fs::File::create(path).unwrap();
    write_loss_csv(&recs, f).unwrap();
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Data lines of an artifact CSV, comment header stripped.
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

pub fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = match std::fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect(),
        Err(_) => Vec::new(),
    };
    v.sort();
    v
}
