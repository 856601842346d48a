//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach the console.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use serde_json::Value;
use tempfile::TempDir;

use sam_ctr::commands::{self, Command, GradcheckConfig, RunConfig};
use sam_ctr::complexity::{table_space, table_time};
use sam_ctr::data::{EncodedRecord, FieldSchema};
use sam_ctr::equivalence::sample_records;
use sam_ctr::linalg::sigmoid;
use sam_ctr::metrics::{auc, logloss};
use sam_ctr::model::ModelConfig;
use sam_ctr::{Model, ModelKind, ModelSpec};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let entries = match commands::gradcheck_suite(&cfg, 7) {
        Ok(e) => e,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let (worst, kind) = entries
        .iter()
        .map(|e| (e.max_rel_err, e.model))
        .fold((0.0, ModelKind::Lr), |a, b| if b.0 > a.0 { b } else { a });
    outcome(
        entries.len() == 15 && worst < 1e-6 && secs < 60.0,
        format!("15 models, worst rel err {worst:.2e} ({kind}), {secs:.1} s"),
    )
}

fn value(m: &Model, name: &str) -> Vec<f64> {
    m.store.get(name).unwrap().data().to_vec()
}

fn cols(m: &Model, name: &str) -> usize {
    m.store.get(name).unwrap().cols()
}

fn emb_row(m: &Model, i: usize, idx: u32) -> Vec<f64> {
    let d = cols(m, &format!("emb.{i}"));
    let e = value(m, &format!("emb.{i}"));
    e[idx as usize * d..(idx as usize + 1) * d].to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn brute_lr(m: &Model, r: &EncodedRecord) -> f64 {
    let schema = &m.spec.schema;
    let mut z = value(m, "bias")[0];
    for (i, f) in schema.fields.iter().enumerate() {
        // explicit one-hot x_i against the weight column
        let w = value(m, &format!("emb.{i}"));
        for v in 0..f.vocab_size {
            let onehot = if v == r.indices[i] as usize { 1.0 } else { 0.0 };
            z += onehot * w[v];
        }
    }
    z
}

fn brute_fm(m: &Model, r: &EncodedRecord) -> f64 {
    let n = m.spec.n();
    let mut z = value(m, "bias")[0];
    for i in 0..n {
        z += value(m, &format!("linear.{i}"))[r.indices[i] as usize];
    }
    for i in 0..n {
        for j in i + 1..n {
            z += dot(&emb_row(m, i, r.indices[i]), &emb_row(m, j, r.indices[j]));
        }
    }
    z
}

fn brute_ipnn(m: &Model, r: &EncodedRecord) -> f64 {
    let n = m.spec.n();
    let d = m.spec.d;
    let theta = value(m, "fi.ipnn.theta");
    let th = |i: usize| &theta[i * d..(i + 1) * d];
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    dot(&emb_row(m, i, r.indices[i]), &emb_row(m, j, r.indices[j]))
                        * dot(th(i), th(j))
                })
                .sum()
        })
        .collect();
    let mut names: Vec<String> = (0..m.spec.mlp.hidden.len())
        .map(|k| format!("mlp.{k}"))
        .collect();
    names.push("head".into());
    let last = names.len() - 1;
    for (k, name) in names.iter().enumerate() {
        let w = value(m, &format!("{name}.w"));
        let b = value(m, &format!("{name}.b"));
        let out = b.len();
        let mut y = b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *yo += xi * w[i * out + o];
            }
        }
        if k < last {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        x = y;
    }
    x[0]
}

fn oracle_equivalence() -> Outcome {
    let schema = FieldSchema::with_vocab_sizes(&[7, 5, 9, 6, 8]).unwrap();
    let records = sample_records(&schema, 1000, 11);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    type Brute = fn(&Model, &EncodedRecord) -> f64;
    let cases: [(ModelKind, usize, Brute); 3] = [
        (ModelKind::Lr, 1, brute_lr),
        (ModelKind::Fm, 4, brute_fm),
        (ModelKind::Ipnn, 4, brute_ipnn),
    ];
    for (kind, d, brute) in cases {
        let mut m = Model::build(ModelSpec::new(kind, schema.clone(), d), 21).unwrap();
        sam_ctr::equivalence::randomize(&mut m.store, 5, 1.0);
        let logits = m.logits(&records).unwrap();
        let gap = records
            .iter()
            .zip(&logits)
            .map(|(r, z)| (brute(&m, r) - z).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
        parts.push(format!("{kind} {gap:.1e}"));
    }
    outcome(worst < 1e-10, format!("1000 records: {}", parts.join(", ")))
}

fn proposition_suite() -> Outcome {
    let cfg = commands::EquivalenceConfig::default();
    let reports = match commands::equivalence_suite(&cfg, 3) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &reports {
        let good = if r.expect_equal {
            r.max_abs_diff < 1e-8
        } else {
            r.max_abs_diff > 1e-3
        };
        ok &= good && r.exhaustive;
        parts.push(format!("{} {:.1e}", r.construction, r.max_abs_diff));
    }
    let n = FieldSchema::with_vocab_sizes(&vec![cfg.vocab; cfg.n])
        .unwrap()
        .combinations();
    outcome(
        ok,
        format!("exhaustive over {n} records: {}", parts.join("; ")),
    )
}

fn complexity_suite() -> Outcome {
    let kinds = [
        ModelKind::Lr,
        ModelKind::Fm,
        ModelKind::Sam1,
        ModelKind::Sam2A,
        ModelKind::Sam2E,
        ModelKind::Sam3A,
        ModelKind::Sam3E,
    ];
    let reports = commands::complexity_grid(&kinds).unwrap();
    let exact = reports
        .iter()
        .filter(|r| r.table_space == Some(r.total))
        .count();
    let time_ok = reports.iter().all(|r| {
        let t = table_time(r.model, r.n, r.d, r.layers).unwrap() as f64;
        (0.5..=2.0).contains(&(r.multiply_adds as f64 / t))
    });
    let autoint = commands::complexity_grid(&[ModelKind::AutoInt]).unwrap();
    let autoint_notes = autoint.iter().filter(|r| !r.notes.is_empty()).count();
    let autoint_l1 = autoint
        .iter()
        .filter(|r| r.layers == 1)
        .all(|r| table_space(ModelKind::AutoInt, r.n, r.d, 1) == Some(r.total));
    outcome(
        exact == reports.len() && time_ok && autoint_l1,
        format!(
            "{exact}/{} grid points exact; AutoInt exact at L=1, {autoint_notes} deeper points noted as known difference",
            reports.len()
        ),
    )
}

fn metric_suite() -> Outcome {
    let half = logloss(&[0.5; 4], &[0, 1, 1, 0]).unwrap();
    let perfect = auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
    let ties = auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
    let example = auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
    let scores = [2.0, -1.0, 0.5, 0.5, -3.0, 4.0, 0.0];
    let labels = [1, 0, 1, 0, 0, 1, 1];
    let probs: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
    let invariant = auc(&scores, &labels).unwrap() == auc(&probs, &labels).unwrap();
    let ok = (half - std::f64::consts::LN_2).abs() < 1e-12
        && perfect == 1.0
        && ties == 0.5
        && example == 0.75
        && invariant;
    outcome(ok, format!("ln2 gap {:.1e}, perfect {perfect}, ties {ties}, example {example}, sigmoid-invariant {invariant}", (half - std::f64::consts::LN_2).abs()))
}

fn run_cmd(cmd: Command, cfg: &RunConfig) -> Result<Value, String> {
    commands::run(cmd, cfg)
        .map(|o| o.summary)
        .map_err(|e| e.to_string())
}

fn benchmark_config(out: &Path, samples: usize) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 1,
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    cfg.generate.samples = samples;
    cfg
}

fn dcm_recovery(dir: &Path) -> Outcome {
    let start = Instant::now();
    let data = dir.join("dcm");
    if let Err(e) = run_cmd(Command::Generate, &benchmark_config(&data, 120_000)) {
        return outcome(false, e);
    }
    let mut aucs = Vec::new();
    let mut bayes = f64::NAN;
    for (kind, d, lr, batch) in DCM_RUNS {
        let mut cfg = benchmark_config(&dir.join(format!("dcm-{kind}")), 0);
        cfg.data = Some(data.clone());
        let mut mc = ModelConfig::new(kind);
        mc.d = d;
        cfg.model = Some(mc);
        cfg.train.lr = lr;
        cfg.train.batch_size = batch;
        cfg.train.epochs = DCM_EPOCHS;
        cfg.train.l2 = DCM_L2;
        match run_cmd(Command::Train, &cfg) {
            Ok(s) => {
                bayes = s["bayes_auc"].as_f64().unwrap_or(f64::NAN);
                aucs.push((kind, s["test"]["auc"].as_f64().unwrap_or(f64::NAN)));
            }
            Err(e) => return outcome(false, format!("{kind}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let get = |k: ModelKind| aucs.iter().find(|a| a.0 == k).map(|a| a.1).unwrap();
    let (lr, fm, sam) = (
        get(ModelKind::Lr),
        get(ModelKind::Fm),
        get(ModelKind::Sam2E),
    );
    let ok = bayes - fm <= 0.02
        && bayes - sam <= 0.02
        && fm >= lr + 0.01
        && sam >= lr + 0.01
        && secs < 600.0;
    outcome(
        ok,
        format!("Bayes {bayes:.4}; FM {fm:.4}, SAM2_E {sam:.4}, LR {lr:.4}; {secs:.0} s"),
    )
}

const DCM_RUNS: [(ModelKind, usize, f64, usize); 3] = [
    (ModelKind::Lr, 8, 0.01, 256),
    (ModelKind::Fm, 8, 0.01, 256),
    (ModelKind::Sam2E, 8, 0.01, 256),
];
const DCM_EPOCHS: usize = 40;
const DCM_L2: f64 = 1e-6;

fn ablation(dir: &Path) -> Outcome {
    let data = dir.join("ablation-data");
    if let Err(e) = run_cmd(Command::Generate, &benchmark_config(&data, 12_000)) {
        return outcome(false, e);
    }
    let out = dir.join("ablation");
    let mut cfg = benchmark_config(&out, 0);
    cfg.data = Some(data);
    let mut mc = ModelConfig::new(ModelKind::Sam3A);
    mc.d = 8;
    cfg.model = Some(mc);
    cfg.train.lr = 0.01;
    cfg.train.batch_size = 256;
    cfg.train.epochs = 2;
    if let Err(e) = run_cmd(Command::Ablation, &cfg) {
        return outcome(false, e);
    }
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap_or_default();
    let rows: Vec<&str> = csv.lines().collect();
    let header_ok = rows.first()
        == Some(&"layers,best_epoch,epochs_run,val_auc,val_logloss,test_auc,test_logloss");
    let body_ok = rows.len() == 5
        && rows[1..].iter().enumerate().all(|(k, r)| {
            let cells: Vec<&str> = r.split(',').collect();
            cells.len() == 7
                && cells[0] == (k + 1).to_string()
                && cells[3..].iter().all(|c| c.parse::<f64>().is_ok())
        });
    let zero = {
        let mut c = cfg.clone();
        c.ablation.layers = vec![0];
        run_cmd(Command::Ablation, &c).is_err()
    };
    let aucs: Vec<String> = rows
        .iter()
        .skip(1)
        .filter_map(|r| r.split(',').nth(5)?.parse::<f64>().ok())
        .map(|a| format!("{a:.4}"))
        .collect();
    outcome(
        header_ok && body_ok && zero,
        format!(
            "L=1..4 test AUC [{}]; L=0 rejected: {zero}",
            aucs.join(", ")
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("det-data");
    if let Err(e) = run_cmd(Command::Generate, &benchmark_config(&data, 4000)) {
        return outcome(false, e);
    }
    let mut histories = Vec::new();
    for (k, kind) in [
        ModelKind::Ipnn,
        ModelKind::Sam2E,
        ModelKind::Ipnn,
        ModelKind::Sam2E,
    ]
    .into_iter()
    .enumerate()
    {
        let out = dir.join(format!("det-{k}"));
        let mut cfg = benchmark_config(&out, 0);
        cfg.data = Some(data.clone());
        let mut mc = ModelConfig::new(kind);
        mc.d = 4;
        cfg.model = Some(mc);
        cfg.train.batch_size = 128;
        cfg.train.epochs = 3;
        cfg.train.lr = 0.01;
        if let Err(e) = run_cmd(Command::Train, &cfg) {
            return outcome(false, e);
        }
        histories.push(std::fs::read(out.join("history.csv")).unwrap_or_default());
    }
    let same =
        histories[0] == histories[2] && histories[1] == histories[3] && !histories[0].is_empty();
    outcome(
        same,
        "IPNN (dropout on) and SAM2_E reruns: history.csv byte-identical",
    )
}

fn main() -> ExitCode {
    let dir = TempDir::new().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("proposition suite", Box::new(proposition_suite)),
        ("complexity suite", Box::new(complexity_suite)),
        (
            "synthetic DCM recovery",
            Box::new(|| dcm_recovery(dir.path())),
        ),
        ("metric unit suite", Box::new(metric_suite)),
        ("layer ablation harness", Box::new(|| ablation(dir.path()))),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
