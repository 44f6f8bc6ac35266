//! Acceptance suite, part 2: directional training trends at desk scale
//! (64x64, K=12, 2000/500 corpus, 60 epochs, 3 seeds). All runs execute once
//! in a shared fixture; the two criteria read from it. Expect a few hours of
//! wall time on a laptop CPU.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use fifa_core::synth::{generate, Corpus};
use fifa_core::trainer::{fit, TrainConfig};

const SEEDS: [u64; 3] = [1, 2, 3];
const CORPUS_TRAIN_SEED: u64 = 100;
const CORPUS_TEST_SEED: u64 = 200;

#[derive(Clone, Debug)]
struct RunResult {
    arm: &'static str,
    final_nme: f64,
    wall_mins: f64,
    loss_decreased: bool,
}

struct AblationResults {
    runs: Vec<RunResult>,
}

impl AblationResults {
    fn arm(&self, arm: &str) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.final_nme)
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v
    }

    fn median(&self, arm: &str) -> f64 {
        let v = self.arm(arm);
        assert_eq!(v.len(), SEEDS.len(), "missing runs for {arm}");
        v[v.len() / 2]
    }
}

fn arm_config(arm: &'static str, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..Default::default() };
    match arm {
        "A:standard" => {
            cfg.siamese_enabled = false;
            cfg.fifa_enabled = false;
            cfg.w_dcca = 0.0;
        }
        "B:+patches" => {
            cfg.siamese_enabled = false;
            cfg.fifa_enabled = true;
            cfg.w_dcca = 0.0;
        }
        "C:+siamese" => {
            cfg.siamese_enabled = true;
            cfg.fifa_enabled = true;
        }
        "sweep:side0" => {
            cfg.siamese_enabled = true;
            cfg = cfg.with_initial_side(0);
        }
        "sweep:side3" => {
            cfg.siamese_enabled = true;
            cfg = cfg.with_initial_side(3);
        }
        "sweep:side7" => {
            cfg.siamese_enabled = true;
            cfg = cfg.with_initial_side(7);
        }
        other => panic!("unknown arm {other}"),
    }
    cfg.validate().expect("arm config valid");
    cfg
}

fn run_all() -> AblationResults {
    let started = Instant::now();
    let input = TrainConfig::default().network.input_h;
    let train = generate(2000, CORPUS_TRAIN_SEED, (input, input)).expect("train corpus");
    let test = generate(500, CORPUS_TEST_SEED, (input, input)).expect("test corpus");
    println!(
        "[ablation fixture] corpora ready ({} train / {} test) in {:.0}s",
        train.samples.len(),
        test.samples.len(),
        started.elapsed().as_secs_f64()
    );

    let arms: [&'static str; 6] = [
        "A:standard",
        "B:+patches",
        "C:+siamese",
        "sweep:side0",
        "sweep:side3",
        "sweep:side7",
    ];
    let mut jobs: Vec<(&'static str, u64)> = Vec::new();
    for &arm in &arms {
        for &seed in &SEEDS {
            jobs.push((arm, seed));
        }
    }

    // two job workers; each run is internally deterministic regardless of
    // thread scheduling, so parallelism only affects wall time
    let queue = Mutex::new(jobs);
    let results = Mutex::new(Vec::<RunResult>::new());
    let (train_ref, test_ref) = (&train, &test);
    std::thread::scope(|scope| {
        for _ in 0..2 {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue").pop();
                let Some((arm, seed)) = job else { break };
                let cfg = arm_config(arm, seed);
                let t = Instant::now();
                let outcome = run_one(train_ref, test_ref, &cfg);
                let wall_mins = t.elapsed().as_secs_f64() / 60.0;
                println!(
                    "[ablation fixture] {arm} seed {seed}: final test NME_ic {:.5} ({wall_mins:.1} min)",
                    outcome.0
                );
                results.lock().expect("results").push(RunResult {
                    arm,
                    final_nme: outcome.0,
                    wall_mins,
                    loss_decreased: outcome.1,
                });
            });
        }
    });
    println!(
        "[ablation fixture] all {} runs done in {:.1} min",
        SEEDS.len() * arms.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    AblationResults {
        runs: results.into_inner().expect("results"),
    }
}

fn run_one(train: &Corpus, test: &Corpus, cfg: &TrainConfig) -> (f64, bool) {
    let outcome = fit(train, test, cfg, None).expect("training run");
    let totals: Vec<f64> = outcome.log.epochs.iter().map(|e| e.mean_total).collect();
    let head: f64 = totals.iter().take(5).sum::<f64>() / 5.0;
    let tail: f64 = totals.iter().rev().take(5).sum::<f64>() / 5.0;
    (outcome.final_test_nme, tail < head)
}

fn results() -> &'static AblationResults {
    static CELL: OnceLock<AblationResults> = OnceLock::new();
    CELL.get_or_init(run_all)
}

#[test]
fn criterion_7_component_trend() {
    let res = results();
    let (a, b, c) = (res.median("A:standard"), res.median("B:+patches"), res.median("C:+siamese"));
    println!("\n[criterion 7] component ablation, median final test NME_ic over seeds {SEEDS:?}:");
    println!("    A standard augs        {:?} -> median {a:.5}", res.arm("A:standard"));
    println!("    B + patch curriculum   {:?} -> median {b:.5}", res.arm("B:+patches"));
    println!("    C + Siamese corr loss  {:?} -> median {c:.5}", res.arm("C:+siamese"));

    let budget_ok = res.runs.iter().all(|r| r.wall_mins < 30.0);
    let losses_ok = res.runs.iter().all(|r| r.loss_decreased);
    let ordered = c < b && b < a;
    let gap_ok = c <= a * 0.97;
    let pass = ordered && gap_ok && budget_ok && losses_ok;
    println!(
        "[criterion 7] {} (C<B<A: {ordered}, C at least 3% below A: {gap_ok} ({:.1}%), per-run budget: {budget_ok}, losses decreased: {losses_ok})",
        if pass { "PASS" } else { "FAIL" },
        (1.0 - c / a) * 100.0
    );
    assert!(pass, "component trend violated: A {a:.5}, B {b:.5}, C {c:.5}");
}

#[test]
fn criterion_8_patch_size_sweep() {
    let res = results();
    let table = [
        ("no patches (side 0)", res.median("sweep:side0")),
        ("3x3 start", res.median("sweep:side3")),
        ("5x5 start", res.median("C:+siamese")),
        ("7x7 start", res.median("sweep:side7")),
    ];
    println!("\n[criterion 8] initial patch size sweep (full Siamese recipe), median final test NME_ic:");
    for (name, med) in &table {
        println!("    {name:<22} {med:.5}");
    }
    let side0 = table[0].1;
    let (s3, s5, s7) = (table[1].1, table[2].1, table[3].1);

    // spread across seeds for the 5x5 arm, as the noise yardstick
    let five = res.arm("C:+siamese");
    let noise = five.last().unwrap() - five.first().unwrap();
    if s5 > s3.min(s7) + noise {
        println!(
            "    note: side 5 trails the best alternative by more than the seed spread ({noise:.5})"
        );
    }

    // hard-fail only if disabling the patches beats every patch size
    let pass = !(side0 < s3 && side0 < s5 && side0 < s7);
    println!(
        "[criterion 8] {} (patches disabled {side0:.5} vs best patched {:.5}; seed spread {noise:.5})",
        if pass { "PASS" } else { "FAIL" },
        s3.min(s5).min(s7)
    );
    assert!(pass, "disabling the patch curriculum beat every patch size");
}
