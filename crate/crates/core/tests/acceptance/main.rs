//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when
//! any criterion fails.

mod oracles;
mod toy;

use std::process::ExitCode;
use std::time::Instant;

use graphtrack::gnn::Fusion;

pub struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Outcome {
    pub fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let mut record = |number: &str, o: Outcome| {
        println!("{} {number:<3} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        outcomes.push(o.pass);
    };
    record("1", oracles::gradients());
    record("2", oracles::bev_iou_oracle());
    record("3", oracles::clustering_oracle());
    record("4", oracles::assignment_oracle());
    record("5", oracles::metrics_traces());
    record("6", oracles::entropy());

    let data = toy::Dataset::generate();
    let full = toy::train_and_track(&data, 6, Fusion::Attention);
    record("7", toy::end_to_end(&data, &full));
    let shallow = toy::train_and_track(&data, 0, Fusion::Attention);
    let mid = toy::train_and_track(&data, 2, Fusion::Attention);
    let stacked = toy::train_and_track(&data, 6, Fusion::NodeStack);
    for (o, number) in toy::ablation(&shallow, &mid, &full, &stacked).into_iter().zip(["8a", "8b"]) {
        record(number, o);
    }
    record("9", toy::determinism(&data, &full));

    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed ({:.0?})", outcomes.len() - failed, outcomes.len(), start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
