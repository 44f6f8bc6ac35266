use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use fifa_core::augment::two_views;
use fifa_core::checkpoint;
use fifa_core::dcca::{cca_oracle, dcca_loss, DccaConfig, ViewFeatures};
use fifa_core::gradsuite;
use fifa_core::metrics;
use fifa_core::rng::Rng;
use fifa_core::synth::{self, generate, Corpus};
use fifa_core::tensor::{Tape, Tensor};
use fifa_core::trainer::{fit, predict, worker_threads, TrainConfig};

const USAGE: u8 = 2;

pub fn dataset_gen(count: usize, seed: u64, size: usize, out: &Path) -> Result<ExitCode> {
    if count == 0 {
        eprintln!("usage error: --count must be at least 1");
        return Ok(ExitCode::from(USAGE));
    }
    if size < 8 || size % 4 != 0 {
        eprintln!("usage error: --size must be a multiple of 4, at least 8");
        return Ok(ExitCode::from(USAGE));
    }
    println!("dataset-gen: count={count} seed={seed} size={size} out={}", out.display());
    let corpus = generate(count, seed, (size, size))?;
    corpus.save(out)?;
    println!("wrote {count} images + manifest.json");
    Ok(ExitCode::SUCCESS)
}

pub fn augment_preview(data: &Path, index: usize, epoch: usize, schedule: &str, out: &Path) -> Result<ExitCode> {
    let (side, interval) = match schedule.split_once(',') {
        Some((a, b)) => match (a.trim().parse::<usize>(), b.trim().parse::<usize>()) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                eprintln!("usage error: --schedule expects \"side,interval\", got {schedule}");
                return Ok(ExitCode::from(USAGE));
            }
        },
        None => {
            eprintln!("usage error: --schedule expects \"side,interval\", got {schedule}");
            return Ok(ExitCode::from(USAGE));
        }
    };
    let corpus = Corpus::load(data).with_context(|| format!("loading corpus {}", data.display()))?;
    if index >= corpus.samples.len() {
        bail!("index {index} out of range (corpus has {} samples)", corpus.samples.len());
    }
    let mut sched = fifa_core::augment::PatchSchedule::new(side, interval, 0)?;
    // a tail long enough that any preview epoch is in range
    sched.tail_epochs = (epoch + 1).saturating_sub(sched.total_epochs()).max(1);
    println!(
        "augment-preview: sample {index}, epoch {epoch}, schedule side {side} interval {interval} (patch side {})",
        sched.side_at(epoch)?
    );
    let cfg = fifa_core::augment::AugConfig::default();
    let (v1, v2) = two_views(&corpus.samples[index], &cfg, &sched, epoch)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    synth::write_ppm(&out.join("view1.ppm"), &v1.image)?;
    synth::write_ppm(&out.join("view2.ppm"), &v2.image)?;
    println!("wrote view1.ppm and view2.ppm to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg: TrainConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_resolved(cfg: &TrainConfig) {
    println!("resolved config (seed {}):", cfg.seed);
    println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
}

pub fn train(
    config: Option<&Path>,
    train_data: &Path,
    test_data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    print_resolved(&cfg);
    let train_corpus = Corpus::load(train_data)?;
    let test_corpus = Corpus::load(test_data)?;
    let initial = match resume {
        Some(p) => {
            println!("resuming from {}", p.display());
            Some(checkpoint::load(p)?)
        }
        None => None,
    };
    let outcome = fit(&train_corpus, &test_corpus, &cfg, initial)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("runlog.csv"), outcome.log.to_csv())?;
    checkpoint::save(&outcome.params, &out.join("final.ckpt"))?;
    checkpoint::save(&outcome.best_params, &out.join("best.ckpt"))?;
    println!(
        "done: final test NME_ic {:.5}, best {:.5} at epoch {}",
        outcome.final_test_nme, outcome.best_test_nme, outcome.best_epoch
    );
    println!("wrote runlog.csv, final.ckpt, best.ckpt to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(ckpt: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    print_resolved(&cfg);
    let params = checkpoint::load(ckpt)?;
    let corpus = Corpus::load(data)?;
    let k_ckpt = params
        .get("head.w")
        .map(|t| t.shape()[0])
        .context("checkpoint has no head.w")?;
    let k_data = corpus.samples.first().map(|s| s.landmarks.len()).unwrap_or(0);
    if k_ckpt != k_data {
        bail!("checkpoint predicts {k_ckpt} landmarks but the corpus annotates {k_data}");
    }
    let images: Vec<Tensor> = corpus.samples.iter().map(|s| s.image.clone()).collect();
    let preds = predict(&params, &images, &cfg)?;
    let result = metrics::evaluate(&preds, &corpus.samples)?;
    println!(
        "samples {}  NME_ic {:.5}  NME_box {:.5}  NME_diag {:.5}  FR^10_ic {:.4}  AUC_box {:.4}",
        result.samples,
        result.mean_nme_ic,
        result.mean_nme_box,
        result.mean_nme_diag,
        result.failure_rate_ic,
        result.auc_box
    );
    if let Some(path) = out {
        fs::write(path, result.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote per-sample metrics to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck() -> Result<ExitCode> {
    println!("gradient suite (central differences, 3 seeds per op):");
    let reports = gradsuite::full_suite()?;
    let mut ok = true;
    for r in &reports {
        println!("  {r}");
        ok &= r.passed();
    }
    if ok {
        println!("all {} checks passed", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        bail!("gradient suite failed");
    }
}

pub fn dcca_test() -> Result<ExitCode> {
    let cfg = DccaConfig::default();
    let mut ok = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("  {name:<42} {} ({detail})", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };

    // oracle equivalence across widths
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        for &d in &[1usize, 4, 8] {
            let mut r1 = Rng::derive(seed, 11);
            let mut r2 = Rng::derive(seed, 12);
            let h1 = Tensor::rand_uniform([64, d], -2.0, 2.0, &mut r1);
            let h2 = Tensor::rand_uniform([64, d], -2.0, 2.0, &mut r2);
            let v = ViewFeatures::new(h1, h2)?;
            let mut tape = Tape::inference();
            let loss = dcca_loss(&mut tape, &v, &cfg)?.item();
            let top: f64 = cca_oracle(&v, &cfg)?.iter().take(d).sum();
            worst = worst.max((-loss - top).abs());
        }
    }
    check("oracle equivalence (20 seeds, d in {1,4,8})", worst < 1e-6, format!("max |diff| {worst:.2e}"));

    // perfect correlation
    let mut rng = Rng::new(7);
    let h = Tensor::rand_uniform([64, 4], -2.0, 2.0, &mut rng);
    let v = ViewFeatures::new(h.clone(), h)?;
    let mut tape = Tape::inference();
    let loss = dcca_loss(&mut tape, &v, &cfg)?.item();
    check("perfect correlation ~ -d", (loss + 4.0).abs() < 5e-3, format!("loss {loss:.6}"));

    // gradient check
    let report = fifa_core::tensor::grad_check(
        "dcca_loss",
        &[vec![16, 8], vec![16, 8]],
        &fifa_core::tensor::GradCheckConfig::with_tolerance(1e-3),
        move |t, xs| {
            let v = ViewFeatures {
                h1: xs[0].clone(),
                h2: xs[1].clone(),
            };
            dcca_loss(t, &v, &cfg)
        },
    )?;
    check("analytic gradient vs central differences", report.passed(), format!("worst rel err {:.2e}", report.worst()));

    if ok {
        println!("dcca suite passed");
        Ok(ExitCode::SUCCESS)
    } else {
        bail!("dcca suite failed");
    }
}

/// The three ablation arms, in the trend table's row order.
fn ablation_arms(base: &TrainConfig, seed: u64) -> Vec<(&'static str, TrainConfig)> {
    let mut standard = base.clone();
    standard.seed = seed;
    standard.siamese_enabled = false;
    standard.fifa_enabled = false;
    standard.w_dcca = 0.0;

    let mut patches = standard.clone();
    patches.fifa_enabled = true;

    let mut siamese = base.clone();
    siamese.seed = seed;
    siamese.siamese_enabled = true;
    siamese.fifa_enabled = true;

    vec![
        ("standard augs", standard),
        ("+ patch curriculum", patches),
        ("+ Siamese corr", siamese),
    ]
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn ablate(
    config: Option<&Path>,
    seeds: &str,
    train_data: &Path,
    test_data: &Path,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let base = load_config(config)?;
    let seeds: Vec<u64> = match seeds.split(',').map(|s| s.trim().parse()).collect() {
        Ok(v) => v,
        Err(_) => {
            eprintln!("usage error: --seeds expects comma-separated integers, got {seeds}");
            return Ok(ExitCode::from(USAGE));
        }
    };
    if seeds.is_empty() {
        eprintln!("usage error: --seeds must name at least one seed");
        return Ok(ExitCode::from(USAGE));
    }
    print_resolved(&base);
    println!("ablate: seeds {seeds:?}, workers {}", worker_threads());

    let train_corpus = Corpus::load(train_data)?;
    let test_corpus = Corpus::load(test_data)?;

    let mut table: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, _) in ablation_arms(&base, 0) {
        table.push((name.to_string(), Vec::new()));
    }
    for &seed in &seeds {
        for (row, (name, cfg)) in ablation_arms(&base, seed).into_iter().enumerate() {
            println!("running {name} seed {seed} ...");
            let outcome = fit(&train_corpus, &test_corpus, &cfg, None)?;
            println!("  final test NME_ic {:.5}", outcome.final_test_nme);
            if let Some(dir) = out {
                let run_dir = dir.join(format!("{}_seed{seed}", name.replace(' ', "_")));
                fs::create_dir_all(&run_dir)?;
                fs::write(run_dir.join("runlog.csv"), outcome.log.to_csv())?;
                checkpoint::save(&outcome.params, &run_dir.join("final.ckpt"))?;
            }
            table[row].1.push(outcome.final_test_nme);
        }
    }

    println!("\ntest NME_ic by configuration (columns = seeds {seeds:?}):");
    println!("{:<22} {:>12} | median", "configuration", "per-seed");
    for (name, values) in &mut table {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.5}")).collect();
        let med = median(values);
        println!("{name:<22} {} | {med:.5}", cells.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

