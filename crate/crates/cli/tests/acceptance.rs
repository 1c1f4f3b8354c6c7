//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use isonmt::checkpoint;
use isonmt::config::{KvFile, Settings};
use isonmt::data::Task;
use isonmt_core::corpus::{Origin, SentencePair, Side, Vocabulary};
use isonmt_core::metrics::{self, bleu, chrf};
use isonmt_core::phonology::{pcc_score, ratio_reward, reward, FallbackRule, PhonemeCounter};
use isonmt_core::policy::{DecodeConfig, ModelConfig, Policy, TokenDistribution};
use isonmt_core::rl::{self, Phase, TraceRecord};
use isonmt_core::training::{
    self, combined_loss, cross_entropy_loss, distillation_loss, kl_consistency_loss,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// sacreBLEU 2.6.0, default settings, on the fixture below.
const SACREBLEU_BLEU: f64 = 44.48329158396452;
const SACREBLEU_CHRF: f64 = 68.4759687491844;
const FIXTURE: &str = include_str!("../../core/tests/data/metric_fixture.tsv");

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn settings_with(file: &str, overrides: &[(&str, &str)]) -> Settings {
    let mut kv = KvFile::parse(&fs::read_to_string(configs().join(file)).unwrap()).unwrap();
    for (k, v) in overrides {
        kv.0.insert(k.to_string(), v.to_string());
    }
    Settings::from_kv(kv, None).unwrap()
}

fn table(counter: &PhonemeCounter) -> &BTreeMap<String, u32> {
    counter.lexicon()
}

/// Compliance by integer arithmetic on table lookups: a pair is inside the
/// band of `tenths`/10 iff 10·|s − t| ≤ tenths·t with s, t ≥ 1.
fn brute_pcc(
    sources: &[String],
    hyps: &[String],
    src: &BTreeMap<String, u32>,
    tgt: &BTreeMap<String, u32>,
    tenths: u64,
) -> f64 {
    let count = |text: &str, t: &BTreeMap<String, u32>| -> u64 {
        text.split_whitespace().map(|w| u64::from(t[w])).sum()
    };
    let hits = sources
        .iter()
        .zip(hyps)
        .filter(|(s, h)| {
            let (s, t) = (count(s, src), count(h, tgt));
            s > 0 && t > 0 && 10 * s.abs_diff(t) <= tenths * t
        })
        .count();
    100.0 * hits as f64 / sources.len() as f64
}

fn criterion_1() -> Check {
    let (hyps, refs): (Vec<&str>, Vec<&str>) = FIXTURE
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_once('\t').unwrap())
        .unzip();
    let b = bleu(&hyps, &refs).unwrap();
    let c = chrf(&hyps, &refs).unwrap();
    let mut ok =
        hyps.len() == 20 && (b - SACREBLEU_BLEU).abs() <= 0.1 && (c - SACREBLEU_CHRF).abs() <= 0.1;

    let settings = settings_with("smoke.kv", &[("n_test", "100")]);
    let task = Task::from_settings(&settings).unwrap();
    let test = task.test.as_ref().unwrap();
    let (st, tt) = (table(&task.source_counter), table(&task.target_counter));
    let sources = test.source_lines();
    let mut evaluations = 0;
    // References as hypotheses, then the outputs of several untrained policies.
    let refs = test.target_lines();
    let pairs: Vec<(&String, &String)> = sources.iter().zip(&refs).collect();
    for (delta, tenths) in [(0.2, 2), (0.1, 1)] {
        let p = pcc_score(&pairs, delta, &task.source_counter, &task.target_counter).unwrap();
        ok &= p == brute_pcc(&sources, &refs, st, tt, tenths);
        evaluations += 1;
    }
    let src = Vocabulary::build(&task.train, Side::Source).unwrap();
    let tgt = Vocabulary::build(&task.train, Side::Target).unwrap();
    for seed in 0..4 {
        let policy = Policy::init(settings.model, src.clone(), tgt.clone(), seed).unwrap();
        let (report, hyps) = metrics::evaluate(
            &policy,
            test,
            &task.source_counter,
            &task.target_counter,
            &DecodeConfig::greedy(),
        )
        .unwrap();
        ok &= report.pcc_02 == brute_pcc(&sources, &hyps, st, tt, 2);
        ok &= report.pcc_01 == brute_pcc(&sources, &hyps, st, tt, 1);
        evaluations += 2;
    }
    check(
        ok,
        format!(
            "BLEU {b:.4} vs {SACREBLEU_BLEU:.4}, chrF {c:.4} vs {SACREBLEU_CHRF:.4}; PCC equal to recount in {evaluations} evaluations"
        ),
    )
}

fn micro_policy(seed: u64) -> Policy {
    let config = ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 8,
        max_len: 8,
    };
    Policy::init(
        config,
        Vocabulary::from_tokens(["a", "b", "c"]),
        Vocabulary::from_tokens(["x", "y", "z"]),
        seed,
    )
    .unwrap()
}

fn micro_batch() -> Vec<SentencePair> {
    [
        ("a b c", "x y"),
        ("c a", "z z x"),
        ("b", "y"),
        ("a a b", "x z"),
    ]
    .iter()
    .map(|(s, t)| SentencePair::new(s, t, Origin::Reference).unwrap())
    .collect()
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn criterion_2() -> Check {
    let student = micro_policy(5);
    let teacher = micro_policy(6);
    let batch = micro_batch();
    let n = student.params().len();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords: Vec<usize> = (0..250).map(|_| rng.gen_range(0..n)).collect();
    let h = 1e-5;
    let perturbed = |k: usize, by: f64| {
        let mut p = student.clone();
        p.params_mut()[k] += by;
        p
    };

    let (_, ce_grad) = cross_entropy_loss(&student, &batch).unwrap();
    let (_, total_grad) = distillation_loss(&student, &teacher, &batch, 1.0).unwrap();
    let (mut worst_ce, mut worst_kl) = (0.0f64, 0.0f64);
    for &k in &coords {
        let ce = |p: &Policy| cross_entropy_loss(p, &batch).unwrap().0.ce;
        let kl = |p: &Policy| distillation_loss(p, &teacher, &batch, 1.0).unwrap().0.kl;
        let (up, down) = (perturbed(k, h), perturbed(k, -h));
        let fd_ce = (ce(&up) - ce(&down)) / (2.0 * h);
        let fd_kl = (kl(&up) - kl(&down)) / (2.0 * h);
        worst_ce = worst_ce.max(relative_error(ce_grad[k], fd_ce));
        worst_kl = worst_kl.max(relative_error(total_grad[k] - ce_grad[k], fd_kl));
    }
    check(
        worst_ce <= 1e-3 && worst_kl <= 1e-3,
        format!(
            "{} coordinates of a {n}-parameter model (V=7, width 8): max relative error CE {worst_ce:.2e}, KL {worst_kl:.2e}",
            coords.len()
        ),
    )
}

fn random_distribution(rng: &mut ChaCha8Rng, v: usize) -> TokenDistribution {
    let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-6.0..6.0)).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    TokenDistribution(e.iter().map(|x| x / z).collect())
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..2000 {
        let v = rng.gen_range(2..12);
        let positions = rng.gen_range(1..5);
        let s: Vec<_> = (0..positions)
            .map(|_| random_distribution(&mut rng, v))
            .collect();
        let t: Vec<_> = (0..positions)
            .map(|_| random_distribution(&mut rng, v))
            .collect();
        let (kl, _) = kl_consistency_loss(&s, &t).unwrap();
        min_kl = min_kl.min(kl);
        max_self = max_self.max(kl_consistency_loss(&s, &s).unwrap().0);
    }
    let policy = micro_policy(9);
    let (report, _) = distillation_loss(&policy, &policy.clone(), &micro_batch(), 1.0).unwrap();
    max_self = max_self.max(report.kl);
    ok &= min_kl >= 0.0 && max_self <= 1e-9;

    let mut exact = true;
    for _ in 0..1000 {
        let (ce, kl, alpha) = (
            rng.gen_range(0.0..10.0),
            rng.gen_range(0.0..10.0),
            rng.gen_range(0.0..3.0),
        );
        exact &= combined_loss(ce, kl, alpha) == ce + alpha * kl;
    }
    for alpha in [0.0, 0.5, 1.0, 2.5] {
        let (r, _) = distillation_loss(&policy, &micro_policy(10), &micro_batch(), alpha).unwrap();
        exact &= r.total == r.ce + alpha * r.kl;
    }
    ok &= exact;

    let counter = PhonemeCounter::from_tsv("unit", "a\t1\n", FallbackRule::Zero).unwrap();
    let sentence = |n: usize| vec!["a"; n].join(" ");
    let mut boundary = true;
    for (s, t, delta) in [
        (9, 10, 0.1),
        (11, 10, 0.1),
        (4, 5, 0.2),
        (6, 5, 0.2),
        (3, 4, 0.25),
        (5, 4, 0.25),
        (7, 10, 0.3),
        (13, 10, 0.3),
    ] {
        boundary &= reward(&sentence(s), &sentence(t), delta, &counter, &counter) == 1;
    }
    for delta in [0.05, 0.1, 0.2, 0.3, 0.5, 0.9] {
        boundary &= ratio_reward(Some(1.0 - delta), delta) == 1
            && ratio_reward(Some(1.0 + delta), delta) == 1;
    }
    boundary &= reward(&sentence(8), &sentence(10), 0.1, &counter, &counter) == 0;
    boundary &= reward(&sentence(12), &sentence(10), 0.1, &counter, &counter) == 0;
    ok &= boundary;
    check(
        ok,
        format!(
            "min KL {min_kl:.3e} over 2000 random cases, max self-KL {max_self:.1e}; total = ce + a*kl exact: {exact}; band edges inclusive: {boundary}"
        ),
    )
}

fn read_trace(dir: &Path) -> Vec<TraceRecord> {
    fs::read_to_string(dir.join("trace.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn criterion_4(run: &Path, settings: &Settings, trace: &[TraceRecord]) -> Check {
    let data = run.join("data");
    let sc = isonmt::data::load_table(&data.join("src_table.tsv"), "src").unwrap();
    let tc = isonmt::data::load_table(&data.join("tgt_table.tsv"), "tgt").unwrap();
    let deltas = settings.rl.schedule.values();
    let mut ok = true;
    let mut scanned = 0;
    for g in 1..=settings.rl.generations {
        let text = fs::read_to_string(run.join(format!("dg/step_{g}.tsv"))).unwrap();
        let mut pairs: Vec<SentencePair> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| {
                let mut cols = l.split('\t');
                SentencePair::new(
                    cols.next().unwrap(),
                    cols.next().unwrap(),
                    Origin::Generated,
                )
                .unwrap()
            })
            .collect();
        let n_real = pairs.len();
        // Pairs whose target counts zero phonemes must never be kept.
        pairs.push(SentencePair::new(&pairs[0].source_text(), "123", Origin::Generated).unwrap());
        pairs
            .push(SentencePair::new(&pairs[1].source_text(), "### ##", Origin::Generated).unwrap());
        let ratios = rl::annotate(&pairs, &sc, &tc);
        let mut previous: Option<Vec<usize>> = None;
        for (f, &delta) in deltas.iter().enumerate() {
            let kept = rl::filter_indices(&ratios, delta);
            let tenths = (delta * 10.0).round() as u64;
            let exact_tenths = (tenths as f64 / 10.0 - delta).abs() < 1e-12;
            for (i, p) in pairs.iter().enumerate() {
                let s: u64 = p
                    .source()
                    .iter()
                    .map(|w| u64::from(sc.lexicon().get(w).copied().unwrap_or(0)))
                    .sum();
                let t: u64 = p
                    .target()
                    .iter()
                    .map(|w| u64::from(tc.lexicon().get(w).copied().unwrap_or(0)))
                    .sum();
                let inside = s > 0 && t > 0 && exact_tenths && 10 * s.abs_diff(t) <= tenths * t;
                ok &= kept.contains(&i) == inside;
                scanned += 1;
            }
            ok &= !kept.contains(&n_real) && !kept.contains(&(n_real + 1));
            if let Some(prev) = &previous {
                ok &= kept.iter().all(|i| prev.contains(i));
            }
            let step = 1 + (g - 1) * deltas.len() + f;
            ok &= trace[step].df_size == Some(kept.len());
            ok &= trace[step].dg_size == Some(n_real);
            previous = Some(kept);
        }
    }
    check(
        ok,
        format!("{scanned} membership decisions re-scanned over {} generated sets; nesting and trace sizes agree", settings.rl.generations),
    )
}

fn rl_prefix(trace: &[TraceRecord]) -> Vec<&TraceRecord> {
    trace.iter().filter(|r| r.phase != Phase::Distill).collect()
}

fn criterion_5(trace: &[TraceRecord], secs: f64) -> Check {
    let rl = rl_prefix(trace);
    let pcc: Vec<f64> = rl.iter().map(|r| r.pcc_02).collect();
    let gain = pcc[pcc.len() - 1] - pcc[0];
    let drops = pcc.windows(2).filter(|w| w[1] < w[0]).count();
    let curve: Vec<String> = pcc.iter().map(|p| format!("{p:.1}")).collect();
    check(
        gain >= 15.0 && drops <= 1 && secs <= 1200.0,
        format!(
            "PCC@0.2 {} (gain {gain:+.1}, {drops} drop); pipeline {secs:.0} s",
            curve.join(" ")
        ),
    )
}

fn criterion_6(trace: &[TraceRecord]) -> Check {
    let base = &trace[0];
    let last_rl = rl_prefix(trace).last().copied().unwrap();
    let Some(st) = trace.iter().find(|r| r.phase == Phase::Distill) else {
        return check(false, "no distillation record");
    };
    check(
        last_rl.bleu < base.bleu && st.bleu >= last_rl.bleu && st.pcc_02 >= base.pcc_02,
        format!(
            "BLEU base {:.2}, final RL {:.2}, ST {:.2}; PCC@0.2 base {:.1}, ST {:.1}",
            base.bleu, last_rl.bleu, st.bleu, base.pcc_02, st.pcc_02
        ),
    )
}

fn criterion_7() -> Check {
    let settings = settings_with("memorize.kv", &[]);
    let task = Task::from_settings(&settings).unwrap();
    let src = Vocabulary::build(&task.train, Side::Source).unwrap();
    let tgt = Vocabulary::build(&task.train, Side::Target).unwrap();
    let mut policy = Policy::init(settings.model, src, tgt, settings.seed).unwrap();
    let report = training::train(&mut policy, &task.train, &settings.rl.base, None).unwrap();
    let final_ce = training::corpus_loss(&policy, &task.train, None, 0.0)
        .unwrap()
        .ce;
    check(
        task.train.len() == 50 && final_ce < 0.1,
        format!(
            "{} pairs, {} epochs: last-epoch mean CE {:.4}, CE of the trained model {final_ce:.4}",
            task.train.len(),
            report.epochs.len(),
            report.last().ce
        ),
    )
}

fn files_equal(a: &Path, b: &Path) -> bool {
    matches!((fs::read(a), fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn criterion_8(run_a: &Path, run_b: &Path, settings: &Settings, trace: &[TraceRecord]) -> Check {
    let mut ok = files_equal(&run_a.join("trace.jsonl"), &run_b.join("trace.jsonl"));
    let trace_identical = ok;
    for g in 1..=settings.rl.generations {
        let rel = format!("dg/step_{g}.tsv");
        ok &= files_equal(&run_a.join(&rel), &run_b.join(&rel));
    }
    let expected =
        1 + settings.rl.generations * settings.rl.schedule.len() + usize::from(settings.rl.st_flag);
    ok &= trace.len() == expected;
    let mut round_trips = 0;
    for step in 0..trace.len() {
        let path = run_a.join(format!("checkpoints/step_{step}.ckpt"));
        ok &= files_equal(&path, &run_b.join(format!("checkpoints/step_{step}.ckpt")));
        let policy = checkpoint::load(&path).unwrap();
        let copy = run_a.join("roundtrip.ckpt");
        checkpoint::save(&policy, &copy).unwrap();
        let again = checkpoint::load(&copy).unwrap();
        let bits = |p: &Policy| p.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ok &= bits(&policy) == bits(&again)
            && policy.hyperparams() == again.hyperparams()
            && files_equal(&path, &copy);
        round_trips += 1;
    }
    let bytes = fs::read(run_a.join("checkpoints/step_0.ckpt")).unwrap();
    ok &= checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err();
    check(
        ok,
        format!(
            "trace.jsonl byte-identical across runs: {trace_identical}; {} records (expected {expected}); {round_trips} checkpoints round-trip bit-exactly",
            trace.len()
        ),
    )
}

fn run_desk(out: &Path) -> f64 {
    let start = Instant::now();
    let config = configs().join("desk.kv");
    let code = isonmt::main_with_args([
        "isonmt".as_ref(),
        "rl-run".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    assert_eq!(code, 0, "rl-run failed");
    start.elapsed().as_secs_f64()
}

fn main() {
    let mut results: Vec<(u8, &str, Check, f64)> = Vec::new();
    let mut timed = |id: u8, name: &'static str, f: &mut dyn FnMut() -> Check, extra: f64| {
        let start = Instant::now();
        let c = f();
        let secs = start.elapsed().as_secs_f64() + extra;
        println!(
            "criterion {id} [{}] {name}: {} ({secs:.1} s)",
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
        results.push((id, name, c, secs));
    };

    timed(
        1,
        "metric oracles",
        &mut || {
            let start = Instant::now();
            let c = criterion_1();
            let secs = start.elapsed().as_secs_f64();
            check(c.pass && secs < 5.0, c.detail)
        },
        0.0,
    );
    timed(
        2,
        "gradient correctness",
        &mut || {
            let start = Instant::now();
            let c = criterion_2();
            check(c.pass && start.elapsed().as_secs_f64() < 60.0, c.detail)
        },
        0.0,
    );
    timed(3, "loss identities", &mut criterion_3, 0.0);
    timed(
        7,
        "memorization",
        &mut || {
            let start = Instant::now();
            let c = criterion_7();
            check(c.pass && start.elapsed().as_secs_f64() <= 120.0, c.detail)
        },
        0.0,
    );

    let tmp = tempfile::tempdir().unwrap();
    let (run_a, run_b) = (tmp.path().join("a"), tmp.path().join("b"));
    let settings = settings_with("desk.kv", &[]);
    let secs_a = run_desk(&run_a);
    let trace = read_trace(&run_a);
    timed(
        4,
        "filter soundness",
        &mut || criterion_4(&run_a, &settings, &trace),
        0.0,
    );
    timed(
        5,
        "compliance trend",
        &mut || criterion_5(&trace, secs_a),
        secs_a,
    );
    timed(
        6,
        "trade-off and distillation recovery",
        &mut || criterion_6(&trace),
        0.0,
    );
    let secs_b = run_desk(&run_b);
    timed(
        8,
        "determinism and persistence",
        &mut || criterion_8(&run_a, &run_b, &settings, &trace),
        secs_b,
    );

    results.sort_by_key(|r| r.0);
    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!();
    for (id, name, c, _) in &results {
        println!("{id}. {name}: {}", if c.pass { "PASS" } else { "FAIL" });
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
