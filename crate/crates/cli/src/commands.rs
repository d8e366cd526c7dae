use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use groundprobe::bench::client::{ReplayClient, Transcript};
use groundprobe::bench::gen_mnist_batch;
use groundprobe::bench::pipeline::{
    build_dataset, parse_articles, parse_direct_qa, parse_entity_list, write_audit_csv, write_dataset_jsonl,
    BuildConfig,
};
use groundprobe::lens::{
    aggregate_by_label, cosine_trajectories, probability_trajectories, write_mean_curve_csv, write_trajectory_csv,
    FinalNorm, LabelAggregate, LogitLens, Outcome, TargetToken, TrajectoryBundle,
};
use groundprobe::metrics::{grade_csv, write_graded_csv, Grader, GradingConfig};
use groundprobe::plot::{Chart, Series};
use groundprobe::probe::{stratified_split, PerplexityThreshold, Probe};
use groundprobe::selective::{
    evaluate_trace, ood_protocol, render_summary, write_decisions_csv, write_report_csv, write_summary_csv, Detectors,
    LabeledSet,
};
use groundprobe::synth::{generate, ood_configs, SynthConfig, SynthOutput};
use groundprobe::trace_store::{read_unembedding, write_unembedding, TraceSet};
use serde::Serialize;

use crate::config::Settings;
use crate::{
    BenchBuildArgs, BenchMnistArgs, Format, GradeArgs, LensArgs, ProbeEvalArgs, ProbeTrainArgs, ReportArgs, SelectArgs,
    SynthArgs, UsageError,
};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_trace(path: &Path) -> Result<TraceSet> {
    let trace = TraceSet::read(path).with_context(|| format!("reading {}", path.display()))?;
    let report = trace.validate();
    if !report.is_valid() {
        let first: Vec<String> = report.violations.iter().take(5).map(|v| v.to_string()).collect();
        bail!(
            "{} has {} invalid entries: {}",
            path.display(),
            report.len(),
            first.join("; ")
        );
    }
    Ok(trace)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn threshold_path(probe: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| probe.with_file_name("threshold.json"))
}

fn load_detectors(probe: &Path, threshold: Option<PathBuf>) -> Result<Detectors> {
    let t = threshold_path(probe, threshold);
    Ok(Detectors {
        probe: Probe::load(probe).with_context(|| format!("loading {}", probe.display()))?,
        threshold: PerplexityThreshold::load(&t).with_context(|| format!("loading {}", t.display()))?,
    })
}

pub fn grade(s: &Settings, a: GradeArgs) -> Result<()> {
    let grader = Grader::new(GradingConfig {
        case_sensitive: a.case_sensitive,
    });
    let file = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let rows = grade_csv(BufReader::new(file), &grader)?;
    match s.format {
        Format::Csv => {
            let mut w = create(&s.out("graded.csv")?)?;
            write_graded_csv(&mut w, &rows)?;
            w.flush()?;
        }
        Format::Json => write_json(&s.out("graded.json")?, &rows)?,
    }
    let n = rows.len().max(1) as f64;
    println!(
        "graded {} rows: inclusion {:.4} exact {:.4} bleu {:.4}",
        rows.len(),
        rows.iter().filter(|r| r.inclusion).count() as f64 / n,
        rows.iter().filter(|r| r.exact).count() as f64 / n,
        rows.iter().map(|r| r.bleu).sum::<f64>() / n,
    );
    Ok(())
}

fn has_both_classes(bundles: &[TrajectoryBundle]) -> bool {
    let has = |o| bundles.iter().any(|b| b.label == Some(o));
    has(Outcome::Success) && has(Outcome::Failure)
}

fn curve_chart(title: &str, y_label: &str, agg: &LabelAggregate, y_range: Option<(f64, f64)>) -> Chart {
    let series = |name: &str, c: &groundprobe::lens::ClassCurve, color: &str| Series {
        name: format!("{name} (n={})", c.count),
        x: (1..=c.mean.len()).map(|l| l as f64).collect(),
        y: c.mean.clone(),
        band: Some(c.std_err.clone()),
        color: color.into(),
    };
    Chart {
        title: title.into(),
        x_label: "layer".into(),
        y_label: y_label.into(),
        series: vec![
            series("success", &agg.success, "#1f77b4"),
            series("failure", &agg.failure, "#d62728"),
        ],
        y_range,
    }
}

fn emit_trajectories(
    s: &Settings,
    stem: &str,
    title: &str,
    bundles: &[TrajectoryBundle],
    y_range: Option<(f64, f64)>,
) -> Result<()> {
    let agg = if has_both_classes(bundles) {
        Some(aggregate_by_label(bundles)?)
    } else {
        eprintln!("warning: {stem}: need labeled successes and failures for class means");
        None
    };
    match s.format {
        Format::Csv => {
            let mut w = create(&s.out(&format!("{stem}_trajectories.csv"))?)?;
            write_trajectory_csv(&mut w, bundles)?;
            w.flush()?;
            if let Some(agg) = &agg {
                let mut w = create(&s.out(&format!("{stem}_mean.csv"))?)?;
                write_mean_curve_csv(&mut w, agg)?;
                w.flush()?;
            }
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                trajectories: &'a [TrajectoryBundle],
                aggregate: Option<&'a LabelAggregate>,
            }
            write_json(
                &s.out(&format!("{stem}.json"))?,
                &Out {
                    trajectories: bundles,
                    aggregate: agg.as_ref(),
                },
            )?;
        }
    }
    if let Some(agg) = &agg {
        std::fs::write(
            s.out(&format!("{stem}.svg"))?,
            curve_chart(title, stem, agg, y_range).to_svg(),
        )?;
        let cross =
            |c: &groundprobe::lens::ClassCurve| c.first_layer_above(0.5).map_or("never".to_string(), |l| l.to_string());
        println!(
            "{stem}: mean success first above 0.5 at layer {}, failure at {}",
            cross(&agg.success),
            cross(&agg.failure)
        );
    }
    Ok(())
}

pub fn lens(s: &Settings, a: LensArgs) -> Result<()> {
    if a.fullinfo.is_none() && a.unembedding.is_none() {
        return Err(UsageError("lens needs --unembedding, --fullinfo, or both".into()).into());
    }
    let visual = load_trace(&a.trace)?;
    if let Some(path) = &a.fullinfo {
        let full = load_trace(path)?;
        let bundles = cosine_trajectories(&visual, &full)?;
        emit_trajectories(s, "cosine", "Visual vs FullInfo cosine similarity", &bundles, None)?;
    }
    if let Some(path) = &a.unembedding {
        let u = read_unembedding(path).with_context(|| format!("reading {}", path.display()))?;
        let norm: Option<FinalNorm> = match &a.final_norm {
            Some(p) => Some(serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?),
            None => None,
        };
        let mut lens = LogitLens::new(&u);
        if let Some(n) = &norm {
            lens = lens.with_norm(n);
        }
        let target = match &a.gold {
            Some(p) => {
                let map: HashMap<String, u32> =
                    serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?;
                TargetToken::Gold(map)
            }
            None => TargetToken::FirstGenerated,
        };
        let bundles = probability_trajectories(&visual, &lens, &target)?;
        emit_trajectories(
            s,
            "probability",
            "Target-token probability by layer",
            &bundles,
            Some((0.0, 1.0)),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeEvalSummary {
    layer: usize,
    train_size: usize,
    eval_size: usize,
    probe_accuracy: f64,
    perplexity_accuracy: f64,
    ensemble_accuracy: f64,
}

pub fn probe_train(s: &Settings, a: ProbeTrainArgs) -> Result<()> {
    if !(a.train_fraction > 0.0 && a.train_fraction <= 1.0) {
        return Err(UsageError(format!("--train-fraction {} is not in (0, 1]", a.train_fraction)).into());
    }
    let layer = a.layer.unwrap_or(s.layer);
    let trace = load_trace(&a.trace)?;
    let all = LabeledSet::from_trace("train", &trace, layer)?;
    let (train_idx, eval_idx) = if a.train_fraction == 1.0 {
        ((0..all.features.len()).collect(), Vec::new())
    } else {
        stratified_split(&all.features.labels, a.train_fraction, s.seed)
    };
    let subset = |name: &str, idx: &[usize]| {
        LabeledSet::new(
            name,
            all.features.subset(idx),
            idx.iter().map(|&i| all.perplexities[i]).collect(),
        )
    };
    let train = subset("train", &train_idx)?;
    let mut config = s.probe;
    if let Some(l) = a.lambda {
        config.lambda = l;
    }
    let detectors = Detectors::fit(&[&train], &config)?;
    detectors.probe.save(s.out("probe.json")?)?;
    detectors.threshold.save(s.out("threshold.json")?)?;
    if let Some(w) = &detectors.probe.meta.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "trained layer-{layer} probe on {} datapoints ({} iterations); perplexity threshold {}",
        train.features.len(),
        detectors.probe.meta.iterations,
        detectors.threshold.threshold
    );
    if eval_idx.is_empty() {
        return Ok(());
    }
    let (inputs, labels) = subset("eval", &eval_idx)?.split_labels();
    let report = detectors.score(&inputs)?.report(&labels, 0.5)?;
    use groundprobe::selective::Method;
    let summary = ProbeEvalSummary {
        layer,
        train_size: train_idx.len(),
        eval_size: eval_idx.len(),
        probe_accuracy: report.method(Method::Probe).detection_accuracy,
        perplexity_accuracy: report.method(Method::Perplexity).detection_accuracy,
        ensemble_accuracy: report.method(Method::Ensemble).detection_accuracy,
    };
    write_json(&s.out("eval.json")?, &summary)?;
    println!(
        "held-out accuracy on {}: probe {:.4} perplexity {:.4} ensemble {:.4}",
        summary.eval_size, summary.probe_accuracy, summary.perplexity_accuracy, summary.ensemble_accuracy
    );
    Ok(())
}

/// File stem, or the parent directory for the generic `visual`/`fullinfo`
/// names written by `synth`.
fn dataset_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|n| n.to_str()).unwrap_or("dataset");
    let parent = path.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str());
    match (stem, parent) {
        ("visual" | "fullinfo", Some(dir)) => dir.to_string(),
        _ => stem.to_string(),
    }
}

pub fn probe_eval(s: &Settings, a: ProbeEvalArgs) -> Result<()> {
    let detectors = load_detectors(&a.probe, a.perplexity_threshold)?;
    let trace = load_trace(&a.trace)?;
    let name = dataset_name(&a.trace);
    let (report, decisions) = evaluate_trace(&detectors, &name, &trace, 0.5)?;
    match s.format {
        Format::Csv => {
            let mut w = create(&s.out("predictions.csv")?)?;
            write_decisions_csv(&mut w, &decisions)?;
            w.flush()?;
            let mut w = create(&s.out("eval.csv")?)?;
            write_report_csv(&mut w, &report)?;
            w.flush()?;
        }
        Format::Json => write_json(&s.out("eval.json")?, &report)?,
    }
    for m in &report.methods {
        println!("{}: accuracy {:.4}", m.method, m.detection_accuracy);
    }
    Ok(())
}

pub fn select(s: &Settings, a: SelectArgs) -> Result<()> {
    let detectors = load_detectors(&a.probe, a.perplexity_threshold)?;
    let trace = load_trace(&a.trace)?;
    let threshold = a.threshold.unwrap_or(s.threshold);
    let name = dataset_name(&a.trace);
    let (report, decisions) = evaluate_trace(&detectors, &name, &trace, threshold)?;
    match s.format {
        Format::Csv => {
            let mut w = create(&s.out("selective.csv")?)?;
            write_report_csv(&mut w, &report)?;
            w.flush()?;
        }
        Format::Json => write_json(&s.out("selective.json")?, &report)?,
    }
    let mut w = create(&s.out("decisions.csv")?)?;
    write_decisions_csv(&mut w, &decisions)?;
    w.flush()?;
    print!("{}", render_summary(&[report]));
    Ok(())
}

fn synth_config(s: &Settings, a: &SynthArgs) -> SynthConfig {
    let mut cfg = s.synth.clone();
    // The model basis stays fixed so traces from different seeds share it.
    cfg.seed = s.seed;
    if let Some(n) = a.per_class {
        cfg.num_success = n;
        cfg.num_failure = n;
    }
    if let Some(v) = a.layers {
        cfg.num_layers = v;
    }
    if let Some(v) = a.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    cfg
}

fn write_synth(dir: &Path, out: &SynthOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    out.visual.write(dir.join("visual.vlt"))?;
    out.fullinfo.write(dir.join("fullinfo.vlt"))?;
    Ok(())
}

pub fn synth(s: &Settings, a: SynthArgs) -> Result<()> {
    let cfg = synth_config(s, &a);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let root = s.out("")?;
    if a.ood {
        let mut unembedding = None;
        for (name, c) in ood_configs(&cfg) {
            let out = generate(&c)?;
            write_synth(&root.join(&name), &out)?;
            println!("{name}: {} records, noise {}", out.visual.records.len(), c.noise);
            unembedding = Some(out.unembedding);
        }
        write_unembedding(&unembedding.expect("four datasets"), root.join("unembedding.vlu"))?;
    } else {
        let out = generate(&cfg)?;
        write_synth(&root, &out)?;
        write_unembedding(&out.unembedding, root.join("unembedding.vlu"))?;
        println!("wrote {} visual and full-info records", out.visual.records.len());
    }
    write_json(&root.join("synth.json"), &cfg)?;
    Ok(())
}

pub fn report(s: &Settings, a: ReportArgs) -> Result<()> {
    let layer = a.layer.unwrap_or(s.layer);
    let threshold = a.threshold.unwrap_or(s.threshold);
    let (train, heldout) = if a.synthetic {
        let mut cfg = s.synth.clone();
        cfg.seed = s.seed;
        let mut sets = Vec::new();
        for (name, c) in ood_configs(&cfg) {
            sets.push(LabeledSet::from_trace(name, &generate(&c)?.visual, layer)?);
        }
        let heldout = sets.pop().expect("four datasets");
        (sets, heldout)
    } else {
        let train = a
            .train
            .iter()
            .map(|p| Ok(LabeledSet::from_trace(dataset_name(p), &load_trace(p)?, layer)?))
            .collect::<Result<Vec<_>>>()?;
        let h = a.heldout.expect("required by clap");
        let heldout = LabeledSet::from_trace(dataset_name(&h), &load_trace(&h)?, layer)?;
        (train, heldout)
    };
    let refs: Vec<&LabeledSet> = train.iter().collect();
    let (detectors, report) = ood_protocol(&refs, heldout, &s.probe, threshold)?;
    write_json(&s.out("detectors.json")?, &detectors)?;
    match s.format {
        Format::Csv => {
            let mut w = create(&s.out("ood_report.csv")?)?;
            write_summary_csv(&mut w, std::slice::from_ref(&report))?;
            w.flush()?;
        }
        Format::Json => write_json(&s.out("ood_report.json")?, &report)?,
    }
    print!("{}", render_summary(&[report]));
    Ok(())
}

pub fn bench_build(s: &Settings, a: BenchBuildArgs) -> Result<()> {
    let entities = parse_entity_list(&read_text(&a.entities)?);
    let articles =
        parse_articles(&read_text(&a.articles)?).with_context(|| format!("parsing {}", a.articles.display()))?;
    let direct = match &a.direct {
        Some(p) => parse_direct_qa(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => Vec::new(),
    };
    let transcript =
        Transcript::parse(&read_text(&a.transcript)?).with_context(|| format!("parsing {}", a.transcript.display()))?;
    let mut client = ReplayClient::new(&transcript);
    let config = BuildConfig {
        category_noun: a.category_noun,
        images_per_pair: a.images_per_pair,
        seed: s.seed,
    };
    let out = build_dataset(&entities, &articles, &direct, &mut client, &config)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let mut w = create(&s.out("dataset.jsonl")?)?;
    write_dataset_jsonl(&mut w, &out.datapoints)?;
    w.flush()?;
    let mut w = create(&s.out("audit.csv")?)?;
    write_audit_csv(&mut w, &out.audit)?;
    w.flush()?;
    let mut w = create(&s.out("lm_calls.jsonl")?)?;
    client.log().write(&mut w)?;
    w.flush()?;
    let kept = out.audit.iter().filter(|r| r.outcome == "kept").count();
    println!(
        "{} datapoints from {kept} of {} QA pairs",
        out.datapoints.len(),
        out.audit.len()
    );
    Ok(())
}

pub fn bench_mnist(s: &Settings, a: BenchMnistArgs) -> Result<()> {
    let items = gen_mnist_batch(a.count, s.seed);
    let mut w = create(&s.out("mnist.jsonl")?)?;
    write_dataset_jsonl(&mut w, &items)?;
    w.flush()?;
    println!("wrote {} arithmetic questions", items.len());
    Ok(())
}
