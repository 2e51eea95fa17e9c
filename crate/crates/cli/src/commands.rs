//! The subcommands and their settings.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use serde::Serialize;
use tgdpo_lab::data::{generate, split_dataset, GeneratorConfig, PreferenceDataset, SyntheticTask, Vocab};
use tgdpo_lab::policy::{ContextOrder, TabularPolicy};
use tgdpo_lab::rewards::{pair_traces, validate_positivity, write_traces_jsonl, GuidanceConfig, PairTraces};
use tgdpo_lab::theory::{run_suite, Fault, SuiteConfig, SUITE_CHECKS};
use tgdpo_lab::train::{
    export_curves, fit_reference, run_two_stage_pipeline, train, MethodConfig, Optimizer, RunRecord, RunSummary,
    TrainConfig,
};

use crate::config::{hidden, opt, switch, Key, Keys, Settings, OUT, SNAPSHOT};
use crate::Failure;

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: Keys,
    pub run: fn(&Settings) -> Result<(), Failure>,
}

pub const COMMANDS: [CommandSpec; 5] = [
    CommandSpec {
        name: "gen-data",
        about: "Generate a synthetic preference dataset",
        keys: &[&[opt("seed", Some("0"), "Random seed"), opt(OUT, None, "Output directory")], DATA_KEYS],
        run: gen_data,
    },
    CommandSpec {
        name: "train",
        about: "Train one method, or the two-stage DPO then TGDPO pipeline",
        keys: &[
            &[
                opt("data", None, "Dataset directory with pairs.jsonl and vocab.json"),
                opt("method", Some("dpo"), "dpo, tgdpo, simpo, rdpo, d2po or tdpo"),
                opt("alpha", Some("0.5"), "TGDPO guidance strength"),
                opt("theta-hat", None, "Checkpoint of the frozen policy supplying token rewards (tgdpo)"),
                switch("two-stage", "Train DPO first and use it as the token-reward model (tgdpo)"),
                opt("reference", None, "Reference checkpoint; fitted on the training split when absent"),
                opt("seed", Some("0"), "Random seed"),
                opt(OUT, None, "Output directory"),
            ],
            TRAIN_KEYS,
        ],
        run: cmd_train,
    },
    CommandSpec {
        name: "verify",
        about: "Run the exact theory checks on random toy MDPs",
        keys: &[&[
            opt("seed", Some("0"), "Random seed"),
            opt("seeds", Some("20"), "Random MDP instances for the decomposition and upper-bound checks"),
            opt("trials", Some("10000"), "Randomized order-preservation trials"),
            hidden("fault", None),
            opt(OUT, None, "Output directory"),
        ]],
        run: cmd_verify,
    },
    CommandSpec {
        name: "compare",
        about: "Train several methods over several seeds and tabulate the results",
        keys: &[
            &[
                opt("methods", None, "Comma-separated methods"),
                opt("alpha", None, "Comma-separated TGDPO alphas, one tgdpo row per value [default: 0.5]"),
                opt("seeds", Some("5"), "Number of seeds, counting up from --seed"),
                opt("seed", Some("0"), "First seed"),
                opt("jobs", Some("1"), "Runs executed in parallel"),
                opt("data", None, "Dataset directory; when absent each seed generates its own"),
                opt("reference", None, "Reference checkpoint; fitted per seed when absent"),
                opt(OUT, None, "Output directory"),
            ],
            DATA_KEYS,
            TRAIN_KEYS,
        ],
        run: cmd_compare,
    },
    CommandSpec {
        name: "export",
        about: "Write the token-level rewards of a frozen policy for every pair",
        keys: &[&[
            opt("data", None, "Dataset directory with pairs.jsonl and vocab.json"),
            opt("theta-hat", None, "Checkpoint of the token-reward policy"),
            opt("reference", None, "Reference checkpoint"),
            opt("reward-beta", Some("0.1"), "Scale of the token rewards"),
            opt("alpha", Some("0.5"), "TGDPO alpha for the positivity report"),
            opt("clamp-floor", Some("0.001"), "Lower clamp of TGDPO weights"),
            opt(OUT, None, "Output directory"),
        ]],
        run: cmd_export,
    },
];

const DATA_KEYS: &[Key] = &[
    opt("task", Some("contains-target"), "sorted, contains-target or majority-token"),
    opt("vocab-size", Some("8"), "Digit vocabulary 0..n-1 (n <= 10)"),
    opt("symbols", None, "Explicit vocabulary, one character per token; overrides vocab-size"),
    opt("target", None, "Target token of contains-target and majority-token [default: first symbol]"),
    opt("n", Some("500"), "Number of pairs"),
    opt("max-len", Some("6"), "Maximum response length"),
    opt("prompt-len", Some("1"), "Prompt length"),
];

const TRAIN_KEYS: &[Key] = &[
    opt("beta", Some("0.1"), "KL strength"),
    opt("reward-beta", Some("0.1"), "Scale of the token rewards from the frozen policy"),
    opt("clamp-floor", Some("0.001"), "Lower clamp of TGDPO weights"),
    opt("simpo-gamma", Some("0.5"), "SimPO target margin"),
    opt("rdpo-alpha", Some("0.1"), "R-DPO length penalty"),
    opt("d2po-gamma", Some("0.98"), "D2PO temporal decay"),
    opt("tdpo-kl-scale", Some("0.01"), "TDPO sequential KL weight"),
    opt("optimizer", Some("adam"), "adam or sgd"),
    opt("lr", Some("0.05"), "Learning rate"),
    opt("adam-b1", Some("0.9"), "Adam first-moment decay"),
    opt("adam-b2", Some("0.999"), "Adam second-moment decay"),
    opt("adam-eps", Some("1e-8"), "Adam epsilon"),
    opt("steps", Some("300"), "Optimizer steps"),
    opt("batch-size", None, "Pairs per step [default: full batch]"),
    opt("eval-every", Some("10"), "Steps between recorded metrics"),
    opt("train-frac", Some("0.8"), "Fraction of pairs used for training"),
    opt("context-order", Some("1"), "Tokens of context seen by a fitted reference, or full"),
    opt("ref-steps", Some("100"), "Gradient steps when fitting the reference"),
    opt("ref-lr", Some("1.0"), "Learning rate when fitting the reference"),
];

/// Create `dir` and write the resolved settings into it.
fn prepare_out(dir: &Path, s: &Settings) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SNAPSHOT), s.snapshot())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_dataset(dir: &str) -> Result<(Vocab, PreferenceDataset), Failure> {
    PreferenceDataset::load_dir(Path::new(dir)).map_err(|e| Failure::Usage(format!("cannot load dataset {dir}: {e}")))
}

fn load_checkpoint(path: &str) -> Result<TabularPolicy, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read checkpoint {path}: {e}")))?;
    TabularPolicy::from_checkpoint_str(&text).map_err(|e| Failure::Usage(format!("checkpoint {path}: {e}")))
}

fn load_matching(path: &str, vocab: &Vocab) -> Result<TabularPolicy, Failure> {
    let p = load_checkpoint(path)?;
    if p.vocab() != vocab {
        return Err(Failure::Usage(format!("checkpoint {path} uses a different vocabulary than the dataset")));
    }
    Ok(p.freeze())
}

fn vocab_from(s: &Settings) -> Result<Vocab, Failure> {
    Ok(match s.get("symbols") {
        Some(chars) => Vocab::from_chars(chars)?,
        None => Vocab::digits(s.parse("vocab-size")?)?,
    })
}

fn generate_from(s: &Settings, vocab: &Vocab, seed: u64) -> Result<PreferenceDataset, Failure> {
    let cfg = GeneratorConfig {
        task: SyntheticTask::parse(s.required("task")?, s.get("target"), vocab)?,
        n_pairs: s.parse("n")?,
        max_len: s.parse("max-len")?,
        prompt_len: s.parse("prompt-len")?,
    };
    Ok(generate(&cfg, vocab, seed)?)
}

fn gen_data(s: &Settings) -> Result<(), Failure> {
    let vocab = vocab_from(s)?;
    let ds = generate_from(s, &vocab, s.parse("seed")?)?;
    let out = s.out_dir("gen-data");
    prepare_out(&out, s)?;
    fs::write(out.join("vocab.json"), vocab.to_json() + "\n")?;
    ds.write_jsonl(&vocab, BufWriter::new(fs::File::create(out.join("pairs.jsonl"))?))?;
    println!("wrote {} pairs to {}", ds.len(), out.display());
    Ok(())
}

fn method_config(name: &str, s: &Settings) -> Result<MethodConfig, Failure> {
    Ok(match MethodConfig::parse(name)? {
        MethodConfig::Simpo { .. } => MethodConfig::Simpo { gamma_margin: s.parse("simpo-gamma")? },
        MethodConfig::Rdpo { .. } => MethodConfig::Rdpo { alpha_len: s.parse("rdpo-alpha")? },
        MethodConfig::D2po { .. } => MethodConfig::D2po { gamma_decay: s.parse("d2po-gamma")? },
        MethodConfig::Tdpo { .. } => MethodConfig::Tdpo { kl_scale: s.parse("tdpo-kl-scale")? },
        m => m,
    })
}

fn train_config(s: &Settings, method: MethodConfig, alpha: f64, seed: u64) -> Result<TrainConfig, Failure> {
    let optimizer = match s.required("optimizer")? {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::Adam { b1: s.parse("adam-b1")?, b2: s.parse("adam-b2")?, eps: s.parse("adam-eps")? },
        other => return Err(Failure::Usage(format!("unknown optimizer {other:?}; valid: adam, sgd"))),
    };
    let cfg = TrainConfig {
        method,
        guidance: GuidanceConfig {
            beta: s.parse("beta")?,
            alpha,
            reward_beta: s.parse("reward-beta")?,
            clamp_floor: s.parse("clamp-floor")?,
        },
        lr: s.parse("lr")?,
        steps: s.parse("steps")?,
        batch_size: s.parse_opt("batch-size")?,
        seed,
        eval_every: s.parse("eval-every")?,
        optimizer,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Training and evaluation split plus the frozen reference.
struct Prepared {
    train: PreferenceDataset,
    eval: PreferenceDataset,
    reference: TabularPolicy,
}

fn prepare(s: &Settings, vocab: &Vocab, ds: &PreferenceDataset, seed: u64) -> Result<Prepared, Failure> {
    let (train, eval) = split_dataset(ds, s.parse("train-frac")?, seed)?;
    let reference = match s.get("reference") {
        Some(path) => load_matching(path, vocab)?,
        None => {
            let order = ContextOrder::parse(s.required("context-order")?)?;
            fit_reference(&train, vocab, order, s.parse("ref-steps")?, s.parse("ref-lr")?)?
        }
    };
    Ok(Prepared { train, eval, reference })
}

fn write_run(dir: &Path, record: &RunRecord) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("summary.json"), &record.summary())?;
    export_curves(record, &dir.join("curves.csv"))?;
    fs::write(dir.join("checkpoint.json"), record.final_policy.to_checkpoint_string() + "\n")?;
    Ok(())
}

fn describe(label: &str, summary: &RunSummary) -> String {
    let conv = summary.steps_to_converge.map_or_else(|| "-".to_string(), |s| s.to_string());
    format!("{label}: final accuracy {:.4}, steps to converge {conv}", summary.final_accuracy)
}

fn cmd_train(s: &Settings) -> Result<(), Failure> {
    let method = method_config(s.required("method")?, s)?;
    let seed = s.parse("seed")?;
    let cfg = train_config(s, method, s.parse("alpha")?, seed)?;
    let two_stage = s.flag("two-stage")?;
    let theta_path = s.get("theta-hat");
    match (method == MethodConfig::Tgdpo, two_stage, theta_path) {
        (true, false, None) => {
            return Err(Failure::Usage("tgdpo needs --theta-hat <checkpoint> or --two-stage".into()))
        }
        (true, true, Some(_)) => return Err(Failure::Usage("give either --theta-hat or --two-stage, not both".into())),
        (false, true, _) => return Err(Failure::Usage("--two-stage applies only to --method tgdpo".into())),
        (false, _, Some(_)) => return Err(Failure::Usage("--theta-hat applies only to --method tgdpo".into())),
        _ => {}
    }
    let (vocab, ds) = load_dataset(s.required("data")?)?;
    let theta_hat = theta_path.map(|p| load_matching(p, &vocab)).transpose()?;
    let prep = prepare(s, &vocab, &ds, seed)?;

    let out = s.out_dir("train");
    prepare_out(&out, s)?;
    fs::write(out.join("reference.json"), prep.reference.to_checkpoint_string() + "\n")?;
    if two_stage {
        let (stage1, stage2) = run_two_stage_pipeline(&cfg, &prep.train, &prep.eval, &prep.reference)?;
        write_run(&out.join("stage1"), &stage1)?;
        write_run(&out.join("stage2"), &stage2)?;
        println!("{}", describe("stage1 dpo", &stage1.summary()));
        println!("{}", describe("stage2 tgdpo", &stage2.summary()));
    } else {
        let record = train(&cfg, &prep.train, &prep.eval, &prep.reference, theta_hat.as_ref())?;
        write_run(&out, &record)?;
        println!("{}", describe(method.name(), &record.summary()));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_verify(s: &Settings) -> Result<(), Failure> {
    let fault = match s.get("fault") {
        None => None,
        Some("token-ratio") => Some(Fault::CorruptTokenRatio),
        Some("optimal-policy") => Some(Fault::CorruptOptimalPolicy),
        Some(other) => return Err(Failure::Usage(format!("unknown fault {other:?}"))),
    };
    let cfg = SuiteConfig { seed: s.parse("seed")?, instances: s.parse("seeds")?, trials: s.parse("trials")?, fault };
    if cfg.instances == 0 || cfg.trials == 0 {
        return Err(Failure::Usage("--seeds and --trials must be positive".into()));
    }
    let out = s.out_dir("verify");
    prepare_out(&out, s)?;
    let reports = run_suite(&cfg);
    let mut failed = Vec::new();
    for (name, report) in SUITE_CHECKS.iter().zip(&reports) {
        fs::write(out.join(format!("{name}.json")), report.to_json() + "\n")?;
        let status = if report.passed { "PASS" } else { "FAIL" };
        println!("{name}: {status} ({} checked)", report.checked);
        if !report.passed {
            if let Some(w) = report.witnesses.first() {
                println!("  witness: {} lhs={} rhs={} gap={}", w.desc, w.lhs, w.rhs, w.gap);
            }
            failed.push(*name);
        }
    }
    println!("wrote {}", out.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("{} of {} checks failed: {}", failed.len(), reports.len(), failed.join(", "))))
    }
}

/// One method setting of a comparison.
#[derive(Clone)]
struct Variant {
    label: String,
    method: MethodConfig,
    alpha: f64,
}

#[derive(Serialize)]
struct RunRow {
    label: String,
    method: String,
    alpha: Option<f64>,
    seed: u64,
    final_accuracy: f64,
    steps_to_converge: Option<usize>,
}

#[derive(Serialize)]
struct MethodRow {
    label: String,
    method: String,
    alpha: Option<f64>,
    runs: usize,
    converged_runs: usize,
    mean_final_accuracy: f64,
    mean_steps_to_converge: Option<f64>,
}

#[derive(Serialize)]
struct RunFailure {
    label: String,
    seed: u64,
    error: String,
}

#[derive(Serialize)]
struct Comparison {
    methods: Vec<MethodRow>,
    runs: Vec<RunRow>,
    failures: Vec<RunFailure>,
}

fn variants(s: &Settings) -> Result<Vec<Variant>, Failure> {
    let names: Vec<String> = s.list("methods")?;
    if names.is_empty() {
        return Err(Failure::Usage("--methods needs at least one method".into()));
    }
    let alphas: Vec<f64> = s.list("alpha")?;
    let default_alpha = alphas.first().copied().unwrap_or(0.5);
    if !alphas.is_empty() && !names.iter().any(|n| n == "tgdpo") {
        return Err(Failure::Usage("--alpha applies only when tgdpo is among --methods".into()));
    }
    let mut out: Vec<Variant> = Vec::new();
    for name in &names {
        let method = method_config(name, s)?;
        if method == MethodConfig::Tgdpo && alphas.len() > 1 {
            out.extend(alphas.iter().map(|&a| Variant { label: format!("tgdpo-a{a}"), method, alpha: a }));
        } else {
            out.push(Variant { label: name.clone(), method, alpha: default_alpha });
        }
    }
    for (i, v) in out.iter().enumerate() {
        if out[..i].iter().any(|u| u.label == v.label) {
            return Err(Failure::Usage(format!("{} is listed twice", v.label)));
        }
    }
    Ok(out)
}

fn run_variant(s: &Settings, v: &Variant, seed: u64, prep: &Prepared, dir: &Path) -> Result<RunRow, Failure> {
    let cfg = train_config(s, v.method, v.alpha, seed)?;
    let record = if v.method == MethodConfig::Tgdpo {
        let (stage1, stage2) = run_two_stage_pipeline(&cfg, &prep.train, &prep.eval, &prep.reference)?;
        write_run(&dir.join("stage1"), &stage1)?;
        write_run(&dir.join("stage2"), &stage2)?;
        stage2
    } else {
        let record = train(&cfg, &prep.train, &prep.eval, &prep.reference, None)?;
        write_run(dir, &record)?;
        record
    };
    let summary = record.summary();
    Ok(RunRow {
        label: v.label.clone(),
        method: summary.method,
        alpha: (v.method == MethodConfig::Tgdpo).then_some(v.alpha),
        seed,
        final_accuracy: summary.final_accuracy,
        steps_to_converge: summary.steps_to_converge,
    })
}

fn method_rows(variants: &[Variant], runs: &[RunRow]) -> Vec<MethodRow> {
    variants
        .iter()
        .filter_map(|v| {
            let rows: Vec<&RunRow> = runs.iter().filter(|r| r.label == v.label).collect();
            let first = rows.first()?;
            let conv: Vec<f64> = rows.iter().filter_map(|r| r.steps_to_converge).map(|c| c as f64).collect();
            Some(MethodRow {
                label: v.label.clone(),
                method: first.method.clone(),
                alpha: first.alpha,
                runs: rows.len(),
                converged_runs: conv.len(),
                mean_final_accuracy: rows.iter().map(|r| r.final_accuracy).sum::<f64>() / rows.len() as f64,
                mean_steps_to_converge: (!conv.is_empty()).then(|| conv.iter().sum::<f64>() / conv.len() as f64),
            })
        })
        .collect()
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write_comparison(out: &Path, table: &Comparison) -> Result<(), Failure> {
    let mut csv = String::from("label,method,alpha,runs,converged_runs,mean_final_accuracy,mean_steps_to_converge\n");
    for m in &table.methods {
        csv += &format!(
            "{},{},{},{},{},{},{}\n",
            m.label,
            m.method,
            cell(m.alpha),
            m.runs,
            m.converged_runs,
            m.mean_final_accuracy,
            cell(m.mean_steps_to_converge)
        );
    }
    fs::write(out.join("comparison.csv"), csv)?;
    let mut csv = String::from("label,method,alpha,seed,final_accuracy,steps_to_converge\n");
    for r in &table.runs {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.method,
            cell(r.alpha),
            r.seed,
            r.final_accuracy,
            cell(r.steps_to_converge)
        );
    }
    fs::write(out.join("runs.csv"), csv)?;
    write_json(&out.join("comparison.json"), table)
}

fn cmd_compare(s: &Settings) -> Result<(), Failure> {
    let variants = variants(s)?;
    let n_seeds: u64 = s.parse("seeds")?;
    let jobs: usize = s.parse("jobs")?;
    if n_seeds == 0 || jobs == 0 {
        return Err(Failure::Usage("--seeds and --jobs must be positive".into()));
    }
    let first: u64 = s.parse("seed")?;
    let seeds: Vec<u64> = (first..first + n_seeds).collect();
    for v in &variants {
        train_config(s, v.method, v.alpha, first)?;
    }
    let loaded = s.get("data").map(load_dataset).transpose()?;
    let vocab = match &loaded {
        Some((v, _)) => v.clone(),
        None => vocab_from(s)?,
    };
    let prepared: Vec<Prepared> = seeds
        .iter()
        .map(|&seed| match &loaded {
            Some((_, ds)) => prepare(s, &vocab, ds, seed),
            None => prepare(s, &vocab, &generate_from(s, &vocab, seed)?, seed),
        })
        .collect::<Result<_, _>>()?;

    let out = s.out_dir("compare");
    prepare_out(&out, s)?;
    let tasks: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..seeds.len()).map(move |k| (v, k))).collect();
    let dir_of = |v: &Variant, seed: u64| -> PathBuf { out.join("runs").join(&v.label).join(format!("seed-{seed}")) };
    let results: Vec<OnceLock<Result<RunRow, Failure>>> = tasks.iter().map(|_| OnceLock::new()).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, k)) = tasks.get(i) else { break };
                let variant = &variants[v];
                let r = run_variant(s, variant, seeds[k], &prepared[k], &dir_of(variant, seeds[k]));
                results[i].set(r).unwrap_or_else(|_| unreachable!("each task runs once"));
            });
        }
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (&(v, k), r) in tasks.iter().zip(results) {
        match r.into_inner().expect("every task ran") {
            Ok(row) => runs.push(row),
            Err(f) => failures.push(RunFailure {
                label: variants[v].label.clone(),
                seed: seeds[k],
                error: f.message().to_string(),
            }),
        }
    }
    let table = Comparison { methods: method_rows(&variants, &runs), runs, failures };
    write_comparison(&out, &table)?;
    for m in &table.methods {
        let conv = cell(m.mean_steps_to_converge.map(|c| format!("{c:.1}")));
        println!(
            "{}: mean final accuracy {:.4}, mean steps to converge {} ({}/{} converged)",
            m.label,
            m.mean_final_accuracy,
            if conv.is_empty() { "-" } else { &conv },
            m.converged_runs,
            m.runs
        );
    }
    println!("wrote {}", out.display());
    if table.failures.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> =
            table.failures.iter().map(|f| format!("{} seed {}: {}", f.label, f.seed, f.error)).collect();
        Err(Failure::Runtime(format!("{} runs failed: {}", list.len(), list.join("; "))))
    }
}

#[derive(Serialize)]
struct Positivity {
    chosen: tgdpo_lab::rewards::PositivityReport,
    rejected: tgdpo_lab::rewards::PositivityReport,
}

fn cmd_export(s: &Settings) -> Result<(), Failure> {
    let (vocab, ds) = load_dataset(s.required("data")?)?;
    let theta_hat = load_matching(s.required("theta-hat")?, &vocab)?;
    let reference = load_matching(s.required("reference")?, &vocab)?;
    let guidance = GuidanceConfig {
        alpha: s.parse("alpha")?,
        reward_beta: s.parse("reward-beta")?,
        clamp_floor: s.parse("clamp-floor")?,
        ..GuidanceConfig::default()
    };
    guidance.validate()?;
    let traces: Vec<PairTraces> = ds
        .pairs
        .iter()
        .map(|p| pair_traces(&theta_hat, &reference, guidance.reward_beta, p))
        .collect::<Result<_, _>>()?;
    let out = s.out_dir("export");
    prepare_out(&out, s)?;
    write_traces_jsonl(&traces, BufWriter::new(fs::File::create(out.join("traces.jsonl"))?))?;
    let chosen: Vec<_> = traces.iter().map(|t| t.chosen.clone()).collect();
    let rejected: Vec<_> = traces.iter().map(|t| t.rejected.clone()).collect();
    let report = Positivity {
        chosen: validate_positivity(&guidance.win_spec()?, &chosen),
        rejected: validate_positivity(&guidance.lose_spec()?, &rejected),
    };
    write_json(&out.join("positivity.json"), &report)?;
    println!(
        "wrote token rewards for {} pairs to {} ({} chosen and {} rejected weights clamped)",
        ds.len(),
        out.display(),
        report.chosen.n_clamped,
        report.rejected.n_clamped
    );
    Ok(())
}
