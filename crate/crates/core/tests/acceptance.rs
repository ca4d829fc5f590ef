//! One PASS/FAIL line per acceptance criterion, then a single assertion over
//! all of them. Lines go straight to stderr so they show without
//! `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dcq::baseline::fc_cosface_loss;
use dcq::cli::metrics_from_csv;
use dcq::config::{Method, RunConfig};
use dcq::evalbench::{head_cost_report, run_experiment_grid, GridAxis, GridReport};
use dcq::gradsuite::run_gradient_suite;
use dcq::model::init_extractor;
use dcq::numerics::{dot, softmax_cross_entropy, Tape, Tensor, NORM_EPS};
use dcq::queue::{dcq_cosface_loss, dcq_logits_with_mask, ClassQueue, EmaGenerator, SENTINEL};
use dcq::rng::{self, Domain};
use dcq::synthdata::assign_longtail_counts;
use dcq::trainer::Trainer;
use rand::Rng;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, pass: bool, detail: String) -> Outcome {
    let line = format!("criterion {id:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    Outcome { id, pass, detail }
}

fn gauss(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut r = rng::stream(seed, Domain::Test, &[rows as u64, cols as u64, 11]);
    Tensor::new(vec![rows, cols], rng::gaussian_vec(&mut r, rows * cols)).unwrap()
}

fn unit(seed: u64, rows: usize, cols: usize) -> Tensor {
    gauss(seed, rows, cols).l2_normalize_rows(NORM_EPS)
}

fn dcq_loss(f: &Tensor, w_pos: &Tensor, q: &ClassQueue, y: &[usize], s: f64, m: f64) -> f64 {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let lg = dcq_logits_with_mask(&mut tape, fv, w_pos, q, y).unwrap();
    dcq_cosface_loss(&mut tape, lg.l_pos, lg.l_neg, s, m).unwrap().1.loss
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let cases = run_gradient_suite(20, 2024).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .map(|c| c.dcq_max_rel_error.max(c.fc_max_rel_error))
        .fold(0.0, f64::max);
    let small = cases
        .iter()
        .all(|c| c.dims.len() <= 4 && *c.dims.last().unwrap() <= 8 && c.batch <= 4 && c.queue_size <= 6);
    let pass = cases.len() == 20 && cases.iter().all(|c| c.passed()) && small && secs < 60.0;
    report(1, pass, format!("20 cases, max rel error {worst:.3e}, {secs:.2}s"))
}

/// Linear head, unit scale and no margin: gradients are the pull and push
/// terms.
fn pull_push_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let (d, c) = (5, 7);
        let f = gauss(case, 1, d);
        let w = gauss(case + 500, d, c);
        let y = (case % c as u64) as usize;
        let mut tape = Tape::new();
        let fv = tape.param(f.clone());
        let wv = tape.param(w.clone());
        let logits = tape.matmul(fv, wv).unwrap();
        let (loss, diag) = tape.softmax_cross_entropy(logits, &[y]).unwrap();
        let g = tape.backward(loss).unwrap();
        let (gf, gw) = (g.get(fv).unwrap(), g.get(wv).unwrap());

        let z = f.matmul(&w).unwrap();
        let mx = z.data().iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.data().iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / sum).collect();
        worst = worst.max((diag.p_pos[0] - p[y]).abs());
        for k in 0..d {
            let mut want = -(1.0 - p[y]) * w.get(k, y);
            for j in (0..c).filter(|&j| j != y) {
                want += p[j] * w.get(k, j);
            }
            worst = worst.max((gf.get(0, k) - want).abs());
            for j in 0..c {
                let want = if j == y { -(1.0 - p[y]) * f.get(0, k) } else { p[j] * f.get(0, k) };
                worst = worst.max((gw.get(k, j) - want).abs());
            }
        }
    }
    report(2, worst <= 1e-9, format!("50 cases, max abs deviation {worst:.3e}"))
}

fn full_coverage() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut r = rng::stream(case, Domain::Test, &[3]);
        let d = r.random_range(2..=16);
        let c = r.random_range(2..=40);
        let s = r.random_range(1.0..64.0);
        let m = r.random_range(0.0..0.5);
        let w_rows = unit(case, c, d);
        let y = r.random_range(0..c);
        let f = gauss(case + 9000, 1, d);
        let others: Vec<usize> = (0..c).filter(|&j| j != y).collect();
        let mut q = ClassQueue::new(c - 1, d).unwrap();
        q.enqueue(&w_rows.select_rows(&others), &others).unwrap();
        let got = dcq_loss(&f, &w_rows.select_rows(&[y]), &q, &[y], s, m);
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let wv = tape.constant(w_rows.transpose().unwrap());
        let want = fc_cosface_loss(&mut tape, fv, wv, &[y], s, m).unwrap().diagnostics.loss;
        worst = worst.max((got - want).abs());
    }
    report(3, worst <= 1e-9, format!("100 instances, max abs deviation {worst:.3e}"))
}

fn masking_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..200u64 {
        let mut r = rng::stream(case, Domain::Test, &[4]);
        let (d, k, b) = (6, 12, 5);
        let mut q = ClassQueue::new(k, d).unwrap();
        // up to two pushes so some queues have wrapped
        for push in 0..2u64 {
            let fill = r.random_range(0..=k);
            if fill > 0 {
                let labels: Vec<usize> = (0..fill).map(|_| r.random_range(0..6)).collect();
                q.enqueue(&unit(case * 2 + push, fill, d), &labels).unwrap();
            }
        }
        let y: Vec<usize> = (0..b).map(|_| r.random_range(0..6)).collect();
        let s = r.random_range(1.0..64.0);
        let m = r.random_range(0.0..0.5);
        let f = gauss(case + 1, b, d);
        let w = unit(case + 2, b, d);
        let got = dcq_loss(&f, &w, &q, &y, s, m);

        let fh = f.l2_normalize_rows(NORM_EPS);
        let mut want = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let mut logits = vec![s * (dot(fh.row(i), w.row(i)) - m)];
            for slot in 0..k {
                let l = q.labels()[slot];
                if l != SENTINEL && l != yi as i64 {
                    logits.push(s * dot(fh.row(i), &q.column(slot)));
                }
            }
            let t = Tensor::new(vec![1, logits.len()], logits).unwrap();
            want += softmax_cross_entropy(&t, &[0]).unwrap().0;
        }
        want /= b as f64;
        worst = worst.max((got - want).abs());
    }
    report(4, worst <= 1e-12, format!("200 queues, max abs deviation {worst:.3e}"))
}

fn ema_closed_form() -> Outcome {
    let dims = [3, 4, 2];
    let filled = |v: f64| {
        let mut p = init_extractor(&dims, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(v);
        }
        p
    };
    let target = filled(1.0);
    let mut worst: f64 = 0.0;
    for alpha in [0.0, 0.9, 0.999, 1.0] {
        let mut g = EmaGenerator::from_parts(filled(0.0), alpha).unwrap();
        for t in 1..=10_000i32 {
            g.ema_update(&target).unwrap();
            let want = 1.0 - alpha.powi(t);
            for tensor in g.shadow().tensors() {
                for &v in tensor.data() {
                    worst = worst.max((v - want).abs());
                }
            }
        }
    }
    report(5, worst <= 1e-12, format!("t up to 1e4, max abs deviation {worst:.3e}"))
}

fn small_dcq() -> RunConfig {
    let mut c = RunConfig::default();
    c.train.batch_size = 8;
    c.train.queue_size = 20;
    c.train.epochs = 2;
    c.data.classes = 40;
    c.data.d_in = 8;
    c.data.max_count = 20;
    c.model.hidden = vec![16];
    c.model.embed_dim = 8;
    c.eval.interval = 0;
    c
}

fn queue_semantics() -> Outcome {
    let mut fifo_ok = true;
    for case in 0..200u64 {
        let mut r = rng::stream(case, Domain::Test, &[6]);
        let k: usize = r.random_range(1..=30);
        let b = r.random_range(1..=k);
        let t = k.div_ceil(b) + r.random_range(0..10);
        let mut q = ClassQueue::new(k, 2).unwrap();
        let mut all = Vec::new();
        for _ in 0..t {
            let y: Vec<usize> = (0..b).map(|_| r.random_range(0..1000)).collect();
            let rows: Vec<Vec<f64>> = y.iter().map(|&l| vec![1.0, l as f64]).collect();
            q.enqueue(&Tensor::from_rows(&rows), &y).unwrap();
            all.extend(y);
        }
        let want: Vec<i64> = all[all.len() - k..].iter().map(|&l| l as i64).collect();
        let paired = (0..k).all(|s| q.column(s)[1] == q.labels()[s] as f64);
        fifo_ok &= q.labels_fifo() == want && paired;
    }

    let c = small_dcq();
    let mut t = Trainer::from_config(&c).unwrap();
    let mut timing_ok = true;
    for _ in 0..10 {
        let before = t.queue().unwrap().clone();
        let w = t.step(0.01).unwrap().w_pos.unwrap();
        let after = t.queue().unwrap();
        let held = |q: &ClassQueue, row: &[f64]| (0..q.capacity()).any(|s| q.column(s) == row);
        timing_ok &= (0..w.rows()).all(|i| !held(&before, w.row(i)) && held(after, w.row(i)));
    }
    report(
        6,
        fifo_ok && timing_ok,
        format!("fifo over 200 sequences {fifo_ok}, positives enqueued after use {timing_ok}"),
    )
}

fn memory_claim() -> Outcome {
    let mut exact = true;
    for (c, k, d) in [(2000u64, 200u64, 32u64), (10_000, 1, 8), (50, 50, 512), (642_962, 65_536, 512)] {
        let q = head_cost_report(Method::Dcq, c, k, d, 16, 4, 0).unwrap();
        exact &= q.param_ratio_vs_full == (k as f64 * d as f64) / (c as f64 * d as f64);
        exact &= q.optimizer_state_bytes == 0;
    }
    let ratio = head_cost_report(Method::Dcq, 642_962, 65_536, 512, 16, 4, 0)
        .unwrap()
        .param_ratio_vs_full;
    let t = Trainer::from_config(&small_dcq()).unwrap();
    let ext = t.extractor().tensors();
    let bufs = t.optimizer_buffers();
    let extractor_only = bufs.len() == ext.len() && bufs.iter().zip(&ext).all(|(b, p)| b.shape() == p.shape());
    let pass = exact && (ratio - 0.10193).abs() < 5e-6 && extractor_only;
    report(
        7,
        pass,
        format!("ratio K/C exact {exact}, large-scale ratio {ratio:.6}, optimizer state on extractor only {extractor_only}"),
    )
}

fn cell<'a>(g: &'a GridReport, value: &str) -> &'a dcq::evalbench::GridRow {
    g.rows.iter().find(|r| r.value == value).unwrap()
}

fn benchmarks() -> Vec<Outcome> {
    let base = RunConfig::default();
    let counts = assign_longtail_counts(&base.data.longtail(), base.data.classes).unwrap();
    let tail = counts.iter().filter(|&&n| n < 10).count() as f64 / counts.len() as f64;
    let vals = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let timed = |axis, v: Vec<String>| {
        let t0 = Instant::now();
        let g = run_experiment_grid(&base, axis, &v);
        (g, t0.elapsed().as_secs_f64())
    };
    let ((methods, t_m), (alphas, t_a), (sampling, t_s)) = std::thread::scope(|s| {
        let a = s.spawn(|| timed(GridAxis::Method, vals(&["dcq", "cosface-full", "cosface-head-only"])));
        let b = s.spawn(|| timed(GridAxis::Alpha, vals(&["0.999", "0"])));
        let c = s.spawn(|| timed(GridAxis::Sampling, vals(&["instance", "class"])));
        (a.join().unwrap(), b.join().unwrap(), c.join().unwrap())
    });

    let mut out = Vec::new();
    match methods {
        Ok(g) => {
            let (dcq, full, head) = (cell(&g, "dcq"), cell(&g, "cosface-full"), cell(&g, "cosface-head-only"));
            let setup = base.train.queue_size * 10 == base.data.classes
                && base.data.d_in == 32
                && base.model.embed_dim == 32
                && base.train.min_instances == 9
                && tail >= 0.8;
            let pass = setup
                && dcq.ver_acc >= full.ver_acc - 0.02
                && dcq.tail_rank1 >= head.tail_rank1
                && t_m <= 600.0;
            out.push(report(
                8,
                pass,
                format!(
                    "tail fraction {tail:.3}; ver dcq {:.4} full {:.4}; tail rank-1 dcq {:.4} head-only {:.4}; {t_m:.0}s",
                    dcq.ver_acc, full.ver_acc, dcq.tail_rank1, head.tail_rank1
                ),
            ));
        }
        Err(e) => out.push(report(8, false, format!("run failed: {e}"))),
    }
    match alphas {
        Ok(g) => {
            let (hi, zero) = (cell(&g, "0.999"), cell(&g, "0"));
            let finite = zero.ver_acc.is_finite() && zero.curves.iter().all(|r| r.train_loss.is_finite());
            out.push(report(
                9,
                finite && hi.ver_acc >= zero.ver_acc,
                format!("ver alpha 0.999 {:.4} alpha 0 {:.4}, alpha 0 finite {finite}; {t_a:.0}s", hi.ver_acc, zero.ver_acc),
            ));
        }
        Err(e) => out.push(report(9, false, format!("run failed: {e}"))),
    }
    match sampling {
        Ok(g) => {
            let (inst, class) = (cell(&g, "instance"), cell(&g, "class"));
            out.push(report(
                10,
                inst.ver_acc >= class.ver_acc,
                format!("ver instance {:.4} class {:.4}; {t_s:.0}s", inst.ver_acc, class.ver_acc),
            ));
        }
        Err(e) => out.push(report(10, false, format!("run failed: {e}"))),
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut c = small_dcq();
    c.train.epochs = 6;
    c.train.decay_epochs = vec![4];
    c.eval.interval = 2;
    c.eval.pairs = 100;
    c.eval.probes = 10;
    c.eval.distractors = 10;
    std::fs::write(&cfg, c.to_json()).unwrap();
    let out = dir.path().join("runs");
    let train = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_dcq"))
            .arg("train")
            .args(args)
            .args(["--out", out.to_str().unwrap()])
            .env_remove("DCQ_SEED")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::path::PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
    };
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
    let first = train(&["--config", cfg.to_str().unwrap(), "--checkpoint-every", "3"]);
    let manifest = first.join("manifest.json");
    let again = train(&["--config", manifest.to_str().unwrap()]);
    let third = train(&["--config", manifest.to_str().unwrap()]);
    let identical = read(&first) == read(&again) && read(&again) == read(&third);

    let mid = first.join("checkpoint-epoch003.dcqc");
    let resumed = train(&["--resume", mid.to_str().unwrap()]);
    let full = metrics_from_csv(std::str::from_utf8(&read(&first)).unwrap()).unwrap();
    let rest = metrics_from_csv(std::str::from_utf8(&read(&resumed)).unwrap()).unwrap();
    let same_rest = rest.len() == 3 && format!("{:?}", &full[3..]) == format!("{rest:?}");
    report(
        11,
        identical && same_rest,
        format!("repeated csv byte-identical {identical}, resume at epoch 3 reproduces rows {same_rest}"),
    )
}

#[test]
fn acceptance() {
    let mut all = vec![
        gradient_suite(),
        pull_push_identity(),
        full_coverage(),
        masking_exactness(),
        ema_closed_form(),
        queue_semantics(),
        memory_claim(),
    ];
    all.extend(benchmarks());
    all.push(determinism());
    let failed: Vec<String> = all
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}: {}", o.id, o.detail))
        .collect();
    assert_eq!(all.len(), 11);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
