//! Text tables for evaluation reports and run traces.

use std::fmt::Write as _;

use isonmt_core::metrics::EvaluationReport;
use isonmt_core::rl::{Phase, TraceRecord};

pub fn report_table(reports: &[EvaluationReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<12} {:>7} {:>7} {:>8} {:>8} {:>6}",
        "Model", "Test set", "BLEU", "chrF", "PCC@0.2", "PCC@0.1", "N"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:<12} {:>7.2} {:>7.2} {:>8.2} {:>8.2} {:>6}",
            r.model_id, r.test_set_id, r.bleu, r.chrf, r.pcc_02, r.pcc_01, r.n_sentences
        );
    }
    out
}

pub fn trace_table(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4} {:<8} {:>3} {:>5} {:>6} {:>6} {:>7} {:>7} {:>8} {:>8}",
        "step", "phase", "gen", "delta", "|D_G|", "|D_F|", "BLEU", "chrF", "PCC@0.2", "PCC@0.1"
    );
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |n| n.to_string());
    for r in trace {
        let phase = match r.phase {
            Phase::Base => "base",
            Phase::Rl => "rl",
            Phase::Distill => "distill",
        };
        let delta = r
            .delta
            .map_or_else(|| "-".to_string(), |d| format!("{d:.2}"));
        let skipped = if r.skipped { "  (skipped)" } else { "" };
        let _ = writeln!(
            out,
            "{:>4} {:<8} {:>3} {:>5} {:>6} {:>6} {:>7.2} {:>7.2} {:>8.2} {:>8.2}{skipped}",
            r.step,
            phase,
            r.generation,
            delta,
            opt(r.dg_size),
            opt(r.df_size),
            r.bleu,
            r.chrf,
            r.pcc_02,
            r.pcc_01
        );
    }
    out
}
