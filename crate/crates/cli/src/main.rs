//! Command-line front end: knowledge preparation, synthetic data, training,
//! zero-shot scoring, grounding maps, evaluation and gradient checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kavl::evaluation::{classification_report, pointing_game, pointing_game_report, GroundTruthMask};
use kavl::fusion::{extract_attention_map, MapRecord, Reduction};
use kavl::gradsuite::{run_suite, SuiteConfig};
use kavl::inference::{batch_zero_shot, QuerySet};
use kavl::io::{
    generate_synthetic, load_dataset, read_json, read_jsonl, write_json_atomic, write_jsonl_atomic, LabelRecord,
    RunConfig, Sample, ScoreRecord, SyntheticSpec,
};
use kavl::knowledge::{
    augment_store, build_entity_set, default_few_shot, render_augmentation_prompt, DescriptionStore, FixtureClient,
    Lexicon, LexiconEntry, ProcessedReport, FIXTURE_DIR_ENV,
};
use kavl::model::Model;
use kavl::numerics::Tensor;
use kavl::training::{derive_knowledge, prepare_dataset, process_reports, train};

#[derive(Parser)]
#[command(name = "kavl", version, about = "Knowledge-augmented vision-language alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract entities, build the entity set, emit augmentation prompts.
    PrepareKnowledge(PrepareArgs),
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus step log.
    Train(TrainArgs),
    /// Score entity queries against every image.
    ZeroShot(ZeroShotArgs),
    /// Write per-entity attention maps.
    Ground(GroundArgs),
    /// Classification metrics and the pointing game.
    Eval(EvalArgs),
    /// Finite-difference check of every module and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct KnowledgeInputs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    descriptions: PathBuf,
    /// Flat JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    inputs: KnowledgeInputs,
    #[arg(long)]
    out: PathBuf,
    /// Directory of canned completions; falls back to the environment.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    negation_rate: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    inputs: KnowledgeInputs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Omit wall-clock fields so repeated runs write identical logs.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct ScoringInputs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated entity names; defaults to the model's entity set.
    #[arg(long, value_delimiter = ',')]
    entities: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ZeroShotArgs {
    #[command(flatten)]
    inputs: ScoringInputs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Mean,
    Max,
}

impl From<ReductionArg> for Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Mean => Reduction::Mean,
            ReductionArg::Max => Reduction::Max,
        }
    }
}

#[derive(Args)]
struct GroundArgs {
    #[command(flatten)]
    inputs: ScoringInputs,
    #[arg(long, value_enum, default_value = "mean")]
    reduction: ReductionArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Attention maps written by `ground`; needs `--dataset` for masks.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Write the combined report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareKnowledge(a) => prepare_knowledge(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::ZeroShot(a) => zero_shot(a),
        Command::Ground(a) => ground(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

struct Knowledge {
    config: RunConfig,
    samples: Vec<Sample>,
    lexicon: Lexicon,
    store: DescriptionStore,
}

fn load_knowledge(inputs: &KnowledgeInputs) -> Result<Knowledge> {
    let config = load_config(inputs.config.as_deref())?;
    let samples = load_dataset(&inputs.dataset, Some(config.image_size))
        .with_context(|| format!("loading dataset {}", inputs.dataset.display()))?;
    let entries: Vec<LexiconEntry> =
        read_jsonl(&inputs.lexicon).with_context(|| format!("loading lexicon {}", inputs.lexicon.display()))?;
    let store = DescriptionStore::load(&inputs.descriptions)
        .with_context(|| format!("loading descriptions {}", inputs.descriptions.display()))?;
    Ok(Knowledge {
        config,
        samples,
        lexicon: Lexicon::new(entries),
        store,
    })
}

#[derive(Serialize)]
struct ReportLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    report: &'a ProcessedReport,
}

fn prepare_knowledge(a: PrepareArgs) -> Result<ExitCode> {
    let mut k = load_knowledge(&a.inputs)?;
    let reports = process_reports(&k.samples, &k.lexicon);
    let lines: Vec<ReportLine> = k
        .samples
        .iter()
        .zip(&reports)
        .map(|(s, r)| ReportLine { id: &s.id, report: r })
        .collect();
    write_jsonl_atomic(&a.out.join("reports.jsonl"), &lines)?;
    let entities = build_entity_set(&reports, k.config.entity_set_size)?;
    write_json_atomic(&a.out.join("entities.json"), &entities.entities())?;

    let few_shot = default_few_shot();
    let missing: Vec<&String> = entities
        .entities()
        .iter()
        .filter(|e| k.store.get(e).is_none_or(|d| d.radiographic_features.trim().is_empty()))
        .collect();
    for e in &missing {
        let definition = k.store.get(e).map(|d| d.definition.as_str()).filter(|d| !d.trim().is_empty());
        let prompt = render_augmentation_prompt(e, definition, &few_shot)?;
        let path = a.out.join("prompts").join(format!("{}.txt", e.replace(' ', "_")));
        kavl::io::atomic_write(&path, prompt.as_bytes())?;
    }

    let client = a.fixtures.map(FixtureClient::new).or_else(FixtureClient::from_env);
    match client {
        Some(c) => {
            let done = augment_store(&mut k.store, &entities, &few_shot, &c)?;
            println!("augmented {} description(s) from {}", done.len(), c.dir().display());
        }
        None if !missing.is_empty() => {
            eprintln!(
                "warning: {} entit(ies) lack radiographic features; prompts written, set {FIXTURE_DIR_ENV} or --fixtures to fill them",
                missing.len()
            );
        }
        None => {}
    }
    k.store.save(&a.out.join("descriptions.jsonl"))?;
    println!(
        "{} reports, {} entities, {} prompt(s) -> {}",
        reports.len(),
        entities.len(),
        missing.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p).with_context(|| format!("reading synthetic spec {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.samples {
        spec.samples = v;
    }
    if let Some(v) = a.image_size {
        spec.image_size = v;
    }
    if let Some(v) = a.negation_rate {
        spec.negation_rate = v;
    }
    let corpus = generate_synthetic(&spec)?;
    corpus.write(&a.out)?;
    println!("{} samples -> {}", corpus.samples.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_train(a: TrainArgs) -> Result<ExitCode> {
    let mut k = load_knowledge(&a.inputs)?;
    if let Some(s) = a.seed {
        k.config.seed = s;
    }
    if a.deterministic {
        k.config.deterministic = true;
    }
    if a.max_steps.is_some() {
        k.config.max_steps = a.max_steps;
    }
    k.config.validate()?;
    let know = derive_knowledge(&k.samples, &k.lexicon, &k.store, k.config.entity_set_size)?;
    let data = prepare_dataset(
        &k.samples,
        &know.reports,
        &k.store,
        &know.entities,
        &know.vocab,
        k.config.max_len,
        k.config.image_size,
    )?;
    let mut model = Model::new(k.config.model_config(), know.vocab, know.entities, k.config.seed)?;
    let log = train(&mut model, &data, &k.config.train_config(), |r| {
        if r.step % 50 == 0 {
            eprintln!("step {:>5} loss {:.5} lr {:.3e}", r.step, r.losses.total, r.lr);
        }
    })?;
    model.save(&a.out.join("checkpoint"))?;
    log.write(&a.out.join("train_log.jsonl"))?;
    k.config.save(&a.out.join("run_config.json"))?;
    let totals = log.totals();
    if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
        println!("{} steps, loss {first:.5} -> {last:.5}", totals.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn score_inputs(inputs: &ScoringInputs) -> Result<(Model, QuerySet, Vec<(String, Tensor)>, Vec<Sample>)> {
    let model =
        Model::load(&inputs.checkpoint).with_context(|| format!("loading checkpoint {}", inputs.checkpoint.display()))?;
    let queries = match &inputs.entities {
        Some(names) => QuerySet::new(&model, names)?,
        None => QuerySet::from_model(&model)?,
    };
    for (name, unknown) in queries.names.iter().zip(&queries.unknown) {
        if *unknown {
            eprintln!("warning: query `{name}` has no known tokens");
        }
    }
    let samples = load_dataset(&inputs.dataset, Some(model.config.image.image_size))
        .with_context(|| format!("loading dataset {}", inputs.dataset.display()))?;
    let images = samples.iter().map(|s| (s.id.clone(), s.image.to_tensor())).collect();
    Ok((model, queries, images, samples))
}

fn zero_shot(a: ZeroShotArgs) -> Result<ExitCode> {
    let (model, queries, images, _) = score_inputs(&a.inputs)?;
    let pred = batch_zero_shot(&model, &images, &queries)?;
    let records = pred.score_records();
    write_jsonl_atomic(&a.inputs.out, &records)?;
    println!("{} scores -> {}", records.len(), a.inputs.out.display());
    Ok(ExitCode::SUCCESS)
}

fn ground(a: GroundArgs) -> Result<ExitCode> {
    let (model, queries, images, _) = score_inputs(&a.inputs)?;
    let pred = batch_zero_shot(&model, &images, &queries)?;
    let reduction: Reduction = a.reduction.into();
    let mut records = Vec::new();
    for (i, id) in pred.image_ids.iter().enumerate() {
        for (m, entity) in pred.entities.iter().enumerate() {
            let map = extract_attention_map(&pred.predictions[i].attention[m], model.grid(), reduction)?;
            records.push(MapRecord::new(id, entity, &map, reduction));
        }
    }
    write_jsonl_atomic(&a.inputs.out, &records)?;
    println!("{} maps -> {}", records.len(), a.inputs.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    classification: Option<kavl::evaluation::ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pointing_game: Option<kavl::evaluation::PointingReport>,
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut out = EvalOutput {
        classification: None,
        pointing_game: None,
    };
    match (&a.scores, &a.labels) {
        (Some(sp), Some(lp)) => {
            let scores: Vec<ScoreRecord> =
                read_jsonl(sp).with_context(|| format!("reading scores {}", sp.display()))?;
            let labels: Vec<LabelRecord> =
                read_jsonl(lp).with_context(|| format!("reading labels {}", lp.display()))?;
            let report = classification_report(&scores, &labels, a.threshold)
                .with_context(|| format!("scores {} do not match labels {}", sp.display(), lp.display()))?;
            print!("{}", report.to_table());
            out.classification = Some(report);
        }
        (None, None) => {}
        _ => bail!("--scores and --labels must be given together"),
    }
    match (&a.maps, &a.dataset) {
        (Some(mp), Some(dp)) => {
            let maps: Vec<MapRecord> = read_jsonl(mp).with_context(|| format!("reading maps {}", mp.display()))?;
            let samples = load_dataset(dp, None).with_context(|| format!("loading dataset {}", dp.display()))?;
            let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
            let mut hits: BTreeMap<String, Vec<bool>> = BTreeMap::new();
            for rec in &maps {
                let sample = by_id
                    .get(rec.image_id.as_str())
                    .with_context(|| format!("map for unknown image `{}` in {}", rec.image_id, mp.display()))?;
                let Some(mask) = sample.masks.get(&rec.entity) else {
                    continue;
                };
                let mask = GroundTruthMask::from_gray(mask)
                    .with_context(|| format!("mask for `{}` on `{}` in {}", rec.entity, rec.image_id, dp.display()))?;
                let hit = pointing_game(&rec.map()?, &mask)?;
                hits.entry(rec.entity.clone()).or_default().push(hit);
            }
            let report = pointing_game_report(&hits)
                .with_context(|| format!("no map in {} has a matching mask in {}", mp.display(), dp.display()))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.to_table());
            out.pointing_game = Some(report);
        }
        (None, None) => {}
        _ => bail!("--maps and --dataset must be given together"),
    }
    if out.classification.is_none() && out.pointing_game.is_none() {
        bail!("nothing to evaluate: pass --scores/--labels and/or --maps/--dataset");
    }
    if let Some(p) = &a.out {
        write_json_atomic(p, &out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = SuiteConfig {
        seeds: a.seeds,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg)?;
    print!("{}", report.summary());
    println!(
        "{} cases, max relative error {:.3e}, {} ms: {}",
        report.cases.len(),
        report.max_rel_error,
        report.elapsed_ms,
        if report.pass { "all pass" } else { "FAILED" }
    );
    if let Some(p) = &a.out {
        write_json_atomic(p, &report)?;
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
