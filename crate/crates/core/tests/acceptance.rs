//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.
//!
//! Run with `cargo test --release -p vmt-core --test acceptance -- --nocapture`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use vmt_core::autodiff::{finite_diff_check, Tape, Tensor, Var};
use vmt_core::data::gen_task;
use vmt_core::eval::time_loss_terms;
use vmt_core::harness::{commands, load_config};
use vmt_core::losses::{
    combined_objective, kl_value, one_hot, random_unit_rows, sample_mixup, vat_perturbation, vmt_loss_with, Draws,
    LabeledBatch, LossSettings, LossTermMask, MixupSite, RegularizerRngs, UnlabeledBatch,
};
use vmt_core::nn::{
    ema_update, forward_classifier, init_params, Architecture, BoundModel, Classifier, ClassifierOutput, Group,
    ModelParams, Weights,
};
use vmt_core::rng::derive_seed;
use vmt_core::trainer::{refine_dirt_t, run_outcome, ExperimentConfig, RunOutcome, RunStatus, Summary};

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // Mix of smooth and very peaked rows.
    let sharp: f64 = rng.random_range(0.0..30.0);
    let z: Vec<f64> = (0..k).map(|_| (rng.random_range(-1.0..1.0) * sharp).exp()).collect();
    let s: f64 = z.iter().sum();
    z.iter().map(|v| v / s).collect()
}

fn row_kl(p: &[f64], q: &[f64]) -> f64 {
    kl_value(&Tensor::from_rows(&[p]).unwrap(), &Tensor::from_rows(&[q]).unwrap()).unwrap()
}

fn median(values: &[f64]) -> f64 {
    Summary::of(values, 0).median
}

fn final_acc(o: &RunOutcome) -> f64 {
    o.target_acc().unwrap_or(f64::NAN)
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let arch = Architecture::new(2, &[16, 16], 2, &[16]).unwrap();
    let settings = LossSettings::default();
    let mask = LossTermMask::all(MixupSite::Logits);
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let params = init_params(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let src = LabeledBatch {
            x: random_tensor(&mut rng, 8, 2, 2.0),
            labels: one_hot(&labels, 2).unwrap(),
        };
        let tgt = UnlabeledBatch {
            x: random_tensor(&mut rng, 8, 2, 2.0),
        };
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, Weights::Live, &[Group::Encoder, Group::Head]);
        let mut rngs = RegularizerRngs::from_seed(seed);
        let draws = combined_objective(&mut tape, &model, &src, &tgt, &settings, &mask, Draws::Sample(&mut rngs))
            .unwrap()
            .draws;

        let disc: Vec<usize> = params.group_indices(Group::Discriminator).collect();
        let points: Vec<Tensor> = params
            .params()
            .iter()
            .filter(|p| p.group != Group::Discriminator)
            .map(|p| p.value.clone())
            .collect();
        let report = finite_diff_check(
            |tape, vars| {
                let mut all = vars.to_vec();
                for &i in &disc {
                    all.push(tape.constant(params.params()[i].value.clone()));
                }
                let mut trainable = vec![true; vars.len()];
                trainable.extend(std::iter::repeat_n(false, disc.len()));
                let model = BoundModel::from_vars(&arch, all, trainable)?;
                Ok(combined_objective(tape, &model, &src, &tgt, &settings, &mask, Draws::Fixed(&draws))?.total)
            },
            &points,
            1e-5,
            1e-4,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} over 5 seeds in {secs:.1}s"),
    )
}

struct Affine {
    w: Var,
    b: Var,
}

impl Classifier for Affine {
    fn input_dim(&self) -> usize {
        3
    }

    fn classify(&self, tape: &mut Tape, x: Var) -> vmt_core::Result<ClassifierOutput> {
        let logits = self.head(tape, x)?;
        let probs = tape.softmax(logits)?;
        Ok(ClassifierOutput {
            features: x,
            logits,
            probs,
        })
    }

    fn head(&self, tape: &mut Tape, features: Var) -> vmt_core::Result<Var> {
        let z = tape.matmul(features, self.w)?;
        tape.add_bias(z, self.b)
    }
}

fn affine_logit_mixing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 1000 {
        let mut tape = Tape::new();
        let w = tape.constant(random_tensor(&mut rng, 3, 4, 3.0));
        let b = tape.constant(Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let model = Affine { w, b };
        let x = random_tensor(&mut rng, 50, 3, 2.0);
        let draw = sample_mixup(50, 1.0, true, &mut rng).unwrap();
        let xv = tape.constant(x.clone());
        let clean = model.classify(&mut tape, xv).unwrap();
        let l = vmt_loss_with(&mut tape, &model, &x, &clean, &draw, MixupSite::Logits, true).unwrap();
        worst = worst.max(tape.value(l).item().unwrap());
        pairs += 50;
    }
    verdict(worst < 1e-10, format!("max loss {worst:.2e} over {pairs} pairs"))
}

fn kl_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..10_000 {
        let k = rng.random_range(2..8);
        let p = random_distribution(&mut rng, k);
        let q = random_distribution(&mut rng, k);
        min_kl = min_kl.min(row_kl(&p, &q));
        max_self = max_self.max(row_kl(&p, &p).abs());
    }
    let a = row_kl(&[0.5, 0.5], &[0.25, 0.75]);
    let b = row_kl(&[1.0, 0.0], &[0.5, 0.5]);
    let a_exact = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let rounded = (a * 1e5).round() / 1e5;
    let pass = min_kl >= -1e-9
        && max_self <= 1e-12
        && (a - a_exact).abs() <= 1e-6
        && rounded == 0.14384
        && (b - 2f64.ln()).abs() <= 1e-9;
    verdict(
        pass,
        format!("min {min_kl:.2e}, max |KL(p||p)| {max_self:.2e}, hand values {a:.7} and {b:.12}"),
    )
}

fn vat_contract(trained: &ModelParams, cfg: &ExperimentConfig) -> Verdict {
    let task = gen_task(&cfg.task_spec()).unwrap();
    let pool = [task.target.train.inputs(), task.target.test.inputs()];
    let rows: Vec<Vec<f64>> = pool.iter().flat_map(|t| t.to_rows()).take(1000).collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let settings = cfg.losses.vat(2);
    let eps = settings.epsilon;

    let mut tape = Tape::new();
    let model = trained.bind(&mut tape, Weights::Shadow, &[]);
    let (_, _, clean) = forward_classifier(trained, Weights::Shadow, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = vat_perturbation(&mut tape, &model, &x, &clean, &settings, &mut rng).unwrap();
    let rand_dir = random_unit_rows(x.rows(), x.cols(), &mut rng).map(|v| v * eps);

    let norm_err = (0..r.rows())
        .map(|i| (r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - eps).abs())
        .fold(0.0, f64::max);
    let shifted = |d: &Tensor| {
        let mut xs = x.clone();
        xs.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
        forward_classifier(trained, Weights::Shadow, &xs).unwrap().2
    };
    let (p_adv, p_rand) = (shifted(&r), shifted(&rand_dir));
    let wins = (0..x.rows())
        .filter(|&i| row_kl(clean.row(i), p_adv.row(i)) > row_kl(clean.row(i), p_rand.row(i)))
        .count();
    let frac = wins as f64 / x.rows() as f64;
    verdict(
        norm_err <= 1e-6 && frac >= 0.95,
        format!("max | ||r|| - eps | {norm_err:.2e}, adversarial wins {wins}/{}", x.rows()),
    )
}

fn beta_sampler() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut l = sample_mixup(10_000, 1.0, true, &mut rng).unwrap().lambdas;
    l.sort_by(f64::total_cmp);
    let n = l.len() as f64;
    let ks = l
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n - v).abs().max((i as f64 / n - v).abs()))
        .fold(0.0, f64::max);
    verdict(ks < 0.02, format!("sup |F_n - F| = {ks:.4} over {} draws", l.len()))
}

/// Runs of the default task shared by the ordering, probe and refinement
/// checks.
struct Arms {
    source_only: Vec<RunOutcome>,
    lc: Vec<RunOutcome>,
    lc_lv: Vec<RunOutcome>,
    full: Vec<RunOutcome>,
    slowest: f64,
}

fn run_arms(cfg: &ExperimentConfig) -> Arms {
    let site = cfg.losses.site;
    let all = LossTermMask::all(site);
    let configs = [
        cfg.source_only(),
        cfg.with_mask(LossTermMask {
            use_vat: false,
            use_vmt: false,
            ..all
        }),
        cfg.with_mask(LossTermMask { use_vmt: false, ..all }),
        cfg.with_mask(all),
    ];
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|a| SEEDS.iter().map(move |&s| (a, s))).collect();
    let results: Vec<(usize, RunOutcome, f64)> = jobs
        .par_iter()
        .map(|&(a, s)| {
            let t = Instant::now();
            let o = run_outcome(&configs[a].with_seed(s));
            (a, o, t.elapsed().as_secs_f64())
        })
        .collect();
    let slowest = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let mut arms: Vec<Vec<RunOutcome>> = vec![Vec::new(); configs.len()];
    for (a, o, _) in results {
        arms[a].push(o);
    }
    let mut it = arms.into_iter();
    Arms {
        source_only: it.next().unwrap(),
        lc: it.next().unwrap(),
        lc_lv: it.next().unwrap(),
        full: it.next().unwrap(),
        slowest,
    }
}

fn adaptation_ordering(arms: &Arms) -> Verdict {
    let src: Vec<f64> = arms.source_only.iter().map(final_acc).collect();
    let full: Vec<f64> = arms.full.iter().map(final_acc).collect();
    let lc: Vec<f64> = arms.lc.iter().map(final_acc).collect();
    let gaps = src.iter().zip(&full).filter(|(s, f)| **f - **s >= 10.0).count();
    let (m_src, m_full, m_lc) = (median(&src), median(&full), median(&lc));
    verdict(
        gaps >= 8 && m_src < m_full && m_lc <= m_full && arms.slowest < 120.0,
        format!(
            "median target: source-only {m_src:.1}, Lc {m_lc:.1}, full {m_full:.1}; gap >= 10 in {gaps}/10 seeds; slowest run {:.1}s",
            arms.slowest
        ),
    )
}

fn interpolation_smoothness(arms: &Arms) -> Verdict {
    let mut lower = 0;
    let mut pairs = Vec::new();
    for (f, v) in arms.full.iter().zip(&arms.lc_lv) {
        if let (Some(a), Some(b)) = (&f.last, &v.last) {
            if f.status != RunStatus::Failed && v.status != RunStatus::Failed && a.probe_mean < b.probe_mean {
                lower += 1;
            }
            pairs.push(format!("{:.2}/{:.2}", a.probe_mean, b.probe_mean));
        }
    }
    verdict(
        lower >= 8,
        format!("full below Lc,Lv in {lower}/10 seeds (full/Lc,Lv: {})", pairs.join(" ")),
    )
}

fn site_variance(dir: &Path) -> Verdict {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/hard.toml");
    let cfg = load_config(&path).unwrap();
    let mut reports = Vec::new();
    for site in [MixupSite::Logits, MixupSite::Probabilities] {
        let mut c = cfg.clone();
        c.losses.site = site;
        let out = dir.join(site.name());
        let report = commands::sweep(&c, &SEEDS, &out, vec!["acceptance".into()]).unwrap();
        let emitted = out.join("sweep_summary.csv").is_file() && out.join("sweep_runs.csv").is_file();
        reports.push((report, emitted));
    }
    let (logits, prob) = (&reports[0].0, &reports[1].0);
    let emitted = reports.iter().all(|r| r.1);
    let pass = prob.summary.std >= logits.summary.std && logits.summary.failed == 0 && emitted;
    verdict(
        pass,
        format!(
            "std: probabilities {:.2} vs logits {:.2}; failed runs: probabilities {}, logits {}; reports emitted: {emitted}",
            prob.summary.std, logits.summary.std, prob.summary.failed, logits.summary.failed
        ),
    )
}

fn refinement_sanity(arms: &Arms, cfg: &ExperimentConfig) -> Verdict {
    let refined: Vec<(f64, Option<f64>)> = arms
        .full
        .par_iter()
        .map(|o| {
            let before = final_acc(o);
            let after = o.state.as_ref().and_then(|s| {
                let c = cfg.with_seed(o.seed);
                refine_dirt_t(s, &c).ok().and_then(|r| r.last_record().map(|m| m.target_acc))
            });
            (before, after)
        })
        .collect();
    let kept = refined
        .iter()
        .filter(|(b, a)| a.is_some_and(|a| a >= b - 1.0))
        .count();

    let init = arms.full[0].state.as_ref().unwrap();
    let mut anchored = cfg.with_seed(arms.full[0].seed);
    anchored.losses.beta = 1e6;
    let student = refine_dirt_t(init, &anchored).unwrap();
    let x = gen_task(&anchored.task_spec()).unwrap().target.test.inputs().clone();
    let (_, _, p_teacher) = forward_classifier(&init.params, Weights::Shadow, &x).unwrap();
    let (_, _, p_student) = forward_classifier(&student.params, Weights::Shadow, &x).unwrap();
    let kl = kl_value(&p_teacher, &p_student).unwrap();

    let pairs: Vec<String> = refined
        .iter()
        .map(|(b, a)| format!("{b:.1}->{}", a.map_or("fail".to_string(), |a| format!("{a:.1}"))))
        .collect();
    verdict(
        kept >= 8 && kl < 1e-3,
        format!(
            "kept within 1 point in {kept}/10 seeds ({}); beta=1e6 mean KL {kl:.2e}",
            pairs.join(" ")
        ),
    )
}

fn ema_and_determinism(dir: &Path) -> Verdict {
    let m = 0.998;
    let mut params = init_params(&Architecture::new(2, &[16, 16], 2, &[16]).unwrap(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in params.params_mut() {
        p.shadow.data_mut().iter_mut().for_each(|s| *s += rng.random_range(-1.0..1.0));
    }
    let mut exact = true;
    let mut ratio_err: f64 = 0.0;
    for _ in 0..50 {
        let before: Vec<(Vec<f64>, Vec<f64>)> = params
            .params()
            .iter()
            .map(|p| (p.shadow.data().to_vec(), p.value.data().to_vec()))
            .collect();
        ema_update(&mut params, m).unwrap();
        let (mut d0, mut d1) = (0.0, 0.0);
        for (p, (s, v)) in params.params().iter().zip(&before) {
            for ((new, old), val) in p.shadow.data().iter().zip(s).zip(v) {
                exact &= new.to_bits() == (m * old + (1.0 - m) * val).to_bits();
                d0 += (old - val).powi(2);
                d1 += (new - val).powi(2);
            }
        }
        ratio_err = ratio_err.max((d1.sqrt() / d0.sqrt() - m).abs());
    }

    let config = dir.join("det.toml");
    std::fs::write(&config, "seed = 5\n[schedule]\niterations = 300\neval_interval = 100\n").unwrap();
    let metrics: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|run| {
            let out = dir.join(run);
            let status = Command::new(env!("CARGO_BIN_EXE_vmt"))
                .args(["train", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .status()
                .unwrap();
            assert!(status.success(), "vmt train exited with {status}");
            std::fs::read(out.join("metrics.csv")).unwrap()
        })
        .collect();
    let identical = metrics[0] == metrics[1] && !metrics[0].is_empty();
    verdict(
        exact && ratio_err < 1e-9 && identical,
        format!("bitwise EMA formula: {exact}, max |ratio - 0.998| {ratio_err:.1e}; metrics byte-identical: {identical}"),
    )
}

fn timing_direction(cfg: &ExperimentConfig) -> Verdict {
    let mut c = cfg.clone();
    c.losses.power_iters = 1;
    let task = gen_task(&c.task_spec()).unwrap();
    let params = init_params(&c.architecture().unwrap(), derive_seed(c.seed, "init")).unwrap();
    let rows: Vec<usize> = (0..c.schedule.batch_size).collect();
    let x = task.target.train.inputs().select_rows(&rows);
    let t = time_loss_terms(&params, &x, &c.losses, 200).unwrap();
    verdict(
        t.vmt_seconds < t.vat_seconds,
        format!(
            "mixup {:.1}us vs adversarial {:.1}us per call over {} repetitions",
            t.vmt_seconds * 1e6,
            t.vat_seconds * 1e6,
            t.repetitions
        ),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };

    report("1 gradient fidelity", gradient_fidelity());
    report("2 affine logit mixing", affine_logit_mixing());
    report("3 KL suite", kl_suite());
    let arms = run_arms(&cfg);
    let trained = arms.full[0].state.as_ref().unwrap().params.clone();
    report("4 adversarial perturbation", vat_contract(&trained, &cfg.with_seed(arms.full[0].seed)));
    report("5 Beta(1,1) sampler", beta_sampler());
    report("6 adaptation ordering", adaptation_ordering(&arms));
    report("7 interpolation smoothness", interpolation_smoothness(&arms));
    report("8 mixup site variance", site_variance(dir.path()));
    report("9 refinement", refinement_sanity(&arms, &cfg));
    report("10 EMA and determinism", ema_and_determinism(dir.path()));
    report("11 timing", timing_direction(&cfg));

    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
