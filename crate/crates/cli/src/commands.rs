use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use likenet_core::data::{
    apply_mean, audit_sample, compute_mean, export_features, import_features, load_split, split,
    synth_generate_with, Entry, Manifest, MeanImage, Split, SynthOptions,
};
use likenet_core::model::PresetOptions;
use likenet_core::optim::EvalReport;
use likenet_core::transfer::{estimate_label_noise, extract_features, fine_tune, train_logreg};
use likenet_core::{
    evaluate, load_checkpoint, save_checkpoint, train, write_atomic, Checkpoint, Dataset, Error,
    FreezeMask, Preset, TrainConfig, TrainOutcome,
};
use serde::Serialize;

use crate::args::{
    AuditArgs, Cli, Command, DataArgs, EvaluateArgs, ExtractArgs, LogregArgs, NoiseArgs,
    PresetName, ServeArgs, SplitArgs, SynthArgs, TrainArgs, TransferArgs,
};
use crate::config::{resolve_train, FileConfig};
use crate::service::{self, AppState, Scorer};

/// Why a command did not complete.
#[derive(Debug)]
pub enum Failure {
    /// The invocation itself is malformed.
    Usage(String),
    /// The pipeline rejected its inputs or failed while running.
    Pipeline(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Pipeline(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "error[usage]: {m}"),
            Failure::Pipeline(e) => write!(f, "error[{}]: {e}", e.kind()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
    file: FileConfig,
}

impl Ctx {
    /// The output directory, `out` when none was given.
    fn out_dir(&self) -> Result<PathBuf, Failure> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// The output directory only if one was requested.
    fn explicit_out(&self) -> Result<Option<PathBuf>, Failure> {
        self.out.as_ref().map(|_| self.out_dir()).transpose()
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        file,
    };
    match cli.command {
        Command::Split(a) => cmd_split(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Transfer(a) => cmd_transfer(&ctx, a),
        Command::ExtractFeatures(a) => cmd_extract(&ctx, a),
        Command::TrainLogreg(a) => cmd_logreg(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::NoiseEstimate(a) => cmd_noise(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Audit(a) => cmd_audit(&ctx, a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Checkpoint timestamp: `SOURCE_DATE_EPOCH` when set, otherwise 0, so runs stay reproducible.
pub fn created_at() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// The run-metadata file: settings echo and final metrics, as TOML.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    created_at: u64,
    settings: BTreeMap<&'static str, toml::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    metrics: BTreeMap<&'static str, toml::Value>,
}

impl<'a> RunRecord<'a> {
    fn new(command: &'a str, ctx: &Ctx) -> Self {
        RunRecord {
            command,
            seed: ctx.seed,
            created_at: created_at(),
            settings: BTreeMap::new(),
            train: None,
            metrics: BTreeMap::new(),
        }
    }

    fn set(&mut self, key: &'static str, v: impl Into<toml::Value>) -> &mut Self {
        self.settings.insert(key, v.into());
        self
    }

    fn metric(&mut self, key: &'static str, v: impl Into<toml::Value>) -> &mut Self {
        self.metrics.insert(key, v.into());
        self
    }

    fn write(&self, dir: &Path) -> Result<(), Failure> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join("run.txt"), text.as_bytes())?;
        Ok(())
    }
}

fn count(n: usize) -> toml::Value {
    toml::Value::Integer(n as i64)
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

/// Labelled images for a run.
enum Source {
    Manifest {
        manifest: Manifest,
        base: PathBuf,
        side: usize,
    },
    Synth {
        data: Dataset,
        manifest: Manifest,
    },
}

impl Source {
    fn open(d: &DataArgs, seed: u64, side: usize) -> Result<Source, Failure> {
        match (&d.manifest, d.synth) {
            (Some(path), None) => Ok(Source::Manifest {
                manifest: Manifest::load(path)?,
                base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
                side,
            }),
            (None, Some(n)) => {
                let data_seed = d.data_seed.unwrap_or(seed);
                let data =
                    synth_generate_with(n, d.noise, data_seed, SynthOptions { side })?.dataset;
                let entries = data
                    .ids
                    .iter()
                    .map(|id| Entry::new(id.clone(), String::new()))
                    .collect();
                let manifest = split(&Manifest::new(entries)?, d.synth_ratios, data_seed)?;
                Ok(Source::Synth { data, manifest })
            }
            _ => Err(Failure::Usage(
                "exactly one of --manifest or --synth is required".into(),
            )),
        }
    }

    fn load(&self, which: Split) -> Result<Dataset, Failure> {
        let ds = match self {
            Source::Manifest {
                manifest,
                base,
                side,
            } => load_split(manifest, which, *side, base)?,
            Source::Synth { data, manifest } => {
                let idx: Vec<usize> = (0..manifest.len())
                    .filter(|&i| manifest.entries[i].split == which)
                    .collect();
                data.subset(&idx)
            }
        };
        Ok(ds)
    }

    fn describe(&self, d: &DataArgs, rec: &mut RunRecord) {
        match self {
            Source::Manifest { .. } => {
                rec.set(
                    "manifest",
                    path_value(d.manifest.as_deref().unwrap_or(Path::new(""))),
                );
            }
            Source::Synth { data, .. } => {
                rec.set("synth_n", count(data.len()));
                rec.set("synth_noise", d.noise);
                rec.set(
                    "data_seed",
                    d.data_seed
                        .map_or(toml::Value::String("seed".into()), |s| count(s as usize)),
                );
                let (a, b, c) = d.synth_ratios;
                rec.set(
                    "synth_ratios",
                    toml::Value::Array(vec![a.into(), b.into(), c.into()]),
                );
            }
        }
    }
}

fn nonempty(ds: Dataset, what: &str) -> Result<Dataset, Failure> {
    if ds.is_empty() {
        return Err(Error::Data(format!("the {what} split has no labelled examples")).into());
    }
    Ok(ds)
}

/// Train and validation sets with the training mean subtracted from both.
fn train_val(src: &Source, out: &Path) -> Result<(Dataset, Dataset), Failure> {
    let mut tr = nonempty(src.load(Split::Train)?, "train")?;
    let mut va = nonempty(src.load(Split::Val)?, "val")?;
    let mean = compute_mean(&tr)?;
    apply_mean(&mut tr, &mean)?;
    apply_mean(&mut va, &mean)?;
    mean.save(out.join("mean.bin"))?;
    Ok((tr, va))
}

/// Writes curves, best and last checkpoints, and fills the training metrics.
fn write_training(
    out: &Path,
    outcome: &mut TrainOutcome,
    rec: &mut RunRecord,
) -> Result<(), Failure> {
    let stamp = created_at();
    outcome.best.meta.created_at = stamp;
    outcome.last.meta.created_at = stamp;
    outcome.curves.save(out.join("curves.csv"))?;
    save_checkpoint(&outcome.best, out.join("best.ckpt"))?;
    save_checkpoint(&outcome.last, out.join("last.ckpt"))?;
    rec.metric("epochs_run", count(outcome.curves.len()));
    rec.metric("params", count(outcome.last.num_params()));
    if let Some(i) = outcome.curves.best_index() {
        let best = &outcome.curves.records[i];
        rec.metric("best_epoch", count(best.epoch));
        rec.metric("best_val_err", best.val_err);
        rec.metric("best_train_err", best.train_err);
    }
    if let Some(last) = outcome.curves.last() {
        rec.metric("final_train_err", last.train_err);
        rec.metric("final_val_err", last.val_err);
        println!(
            "epoch {}: train_err {:.4} val_err {:.4}",
            last.epoch, last.train_err, last.val_err
        );
    }
    if let Some(i) = outcome.curves.best_index() {
        let best = &outcome.curves.records[i];
        println!("best epoch {}: val_err {:.4}", best.epoch, best.val_err);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> CmdResult {
    let (preset, base) = match a.preset {
        PresetName::Attractiveness => (Preset::Attractiveness, TrainConfig::attractiveness()),
        PresetName::Gender => (Preset::Gender, TrainConfig::gender()),
    };
    let mut opts = PresetOptions::default();
    ctx.file.model.apply(&mut opts);
    opts.input_side = a.input_side.unwrap_or(opts.input_side);
    opts.width_divisor = a.width_divisor.unwrap_or(opts.width_divisor);
    let spec = preset.spec_with(opts);
    spec.validate()?;
    let cfg = resolve_train(base, &ctx.file, &a.train.overrides(), ctx.seed)?;

    let out = ctx.out_dir()?;
    let src = Source::open(&a.data, ctx.seed, opts.input_side)?;
    let (tr, va) = train_val(&src, &out)?;
    let model = Checkpoint::init(spec, ctx.seed)?;
    log::info!(
        "training {} ({} parameters) on {} examples, validating on {}",
        model.spec.name,
        model.num_params(),
        tr.len(),
        va.len()
    );
    let mut outcome = train(
        &model,
        &FreezeMask::all_trainable(&model.spec)?,
        &tr,
        &va,
        &cfg,
    )?;

    let mut rec = RunRecord::new("train", ctx);
    rec.set("preset", model.spec.name.clone())
        .set("input_side", count(opts.input_side))
        .set("width_divisor", count(opts.width_divisor))
        .set("n_train", count(tr.len()))
        .set("n_val", count(va.len()));
    src.describe(&a.data, &mut rec);
    rec.train = Some(&cfg);
    write_training(&out, &mut outcome, &mut rec)?;
    rec.write(&out)
}

fn cmd_transfer(ctx: &Ctx, a: TransferArgs) -> CmdResult {
    let pre = load_checkpoint(&a.pretrained)?;
    let mut cfg = resolve_train(
        TrainConfig::fine_tune(),
        &ctx.file,
        &a.train.overrides(),
        ctx.seed,
    )?;
    // the tail is fully connected and trained without dropout
    cfg.dropout_enabled = false;
    let out = ctx.out_dir()?;
    let src = Source::open(&a.data, ctx.seed, pre.spec.input_shape[1])?;
    let (tr, va) = train_val(&src, &out)?;
    let mut outcome = fine_tune(&pre, a.last_k, &tr, &va, &cfg)?;

    let mut rec = RunRecord::new("transfer", ctx);
    rec.set("pretrained", path_value(&a.pretrained))
        .set("last_k", count(a.last_k))
        .set("n_train", count(tr.len()))
        .set("n_val", count(va.len()));
    src.describe(&a.data, &mut rec);
    rec.train = Some(&cfg);
    rec.metric(
        "trainable_params",
        count(pre.spec.count_params(Some(a.last_k))?),
    );
    write_training(&out, &mut outcome, &mut rec)?;
    rec.write(&out)
}

fn cmd_extract(ctx: &Ctx, a: ExtractArgs) -> CmdResult {
    let model = load_checkpoint(&a.model)?;
    model.spec.layer_index(&a.layer)?;
    let out = ctx.out_dir()?;
    let src = Source::open(&a.data, ctx.seed, model.spec.input_shape[1])?;
    let mean = match &a.mean {
        Some(p) => MeanImage::load(p)?,
        None => {
            let m = compute_mean(&nonempty(src.load(Split::Train)?, "train")?)?;
            m.save(out.join("mean.bin"))?;
            m
        }
    };
    let mut rec = RunRecord::new("extract-features", ctx);
    rec.set("model", path_value(&a.model))
        .set("layer", a.layer.clone());
    src.describe(&a.data, &mut rec);
    for which in [Split::Train, Split::Val, Split::Test] {
        let mut ds = src.load(which)?;
        if ds.is_empty() {
            continue;
        }
        apply_mean(&mut ds, &mean)?;
        let fm = extract_features(&model, &a.layer, &ds)?;
        let path = out.join(format!("{which}.feat"));
        export_features(&fm, &path)?;
        println!(
            "{which}: {} rows of dimension {} -> {}",
            fm.rows,
            fm.dim,
            path.display()
        );
        rec.metric("dim", count(fm.dim));
        rec.metric(
            match which {
                Split::Train => "rows_train",
                Split::Val => "rows_val",
                _ => "rows_test",
            },
            count(fm.rows),
        );
    }
    rec.write(&out)
}

fn cmd_logreg(ctx: &Ctx, a: LogregArgs) -> CmdResult {
    let tr = import_features(&a.train_features)?;
    let va = import_features(&a.val_features)?;
    let cfg = resolve_train(
        TrainConfig::logreg(),
        &ctx.file,
        &a.train.overrides(),
        ctx.seed,
    )?;
    let out = ctx.out_dir()?;
    let mut outcome = train_logreg(&tr, &va, &cfg)?;
    let mut rec = RunRecord::new("train-logreg", ctx);
    rec.set("train_features", path_value(&a.train_features))
        .set("val_features", path_value(&a.val_features))
        .set("dim", count(tr.dim));
    rec.train = Some(&cfg);
    write_training(&out, &mut outcome, &mut rec)?;
    rec.write(&out)
}

fn report_lines(r: &EvalReport) -> String {
    let rows: Vec<String> = r.confusion.iter().map(|row| format!("{row:?}")).collect();
    format!(
        "n {}\nmisclassification {:.4}\naccuracy {:.4}\nmean_nll {:.6}\nconfusion (rows true, columns predicted) {}",
        r.n,
        r.misclassification,
        r.accuracy,
        r.mean_nll,
        rows.join(" ")
    )
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> CmdResult {
    let model = load_checkpoint(&a.model)?;
    let which: Split = a.split.into();
    let mut rec = RunRecord::new("evaluate", ctx);
    rec.set("model", path_value(&a.model));
    let ds = match &a.features {
        Some(p) => {
            rec.set("features", path_value(p));
            import_features(p)?.to_dataset()
        }
        None => {
            let src = Source::open(&a.data, ctx.seed, model.spec.input_shape[1])?;
            src.describe(&a.data, &mut rec);
            rec.set("split", which.to_string());
            let mut ds = nonempty(src.load(which)?, which.as_str())?;
            match &a.mean {
                Some(p) => {
                    rec.set("mean", path_value(p));
                    apply_mean(&mut ds, &MeanImage::load(p)?)?;
                }
                None => log::warn!("no --mean given; evaluating on raw pixel values"),
            }
            ds
        }
    };
    let report = evaluate(&model, &ds)?;
    println!("{}", report_lines(&report));
    if let Some(out) = ctx.explicit_out()? {
        let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&out.join("eval.json"), &json)?;
        rec.metric("n", count(report.n))
            .metric("accuracy", report.accuracy)
            .metric("misclassification", report.misclassification)
            .metric("mean_nll", report.mean_nll);
        rec.write(&out)?;
    }
    Ok(())
}

fn cmd_noise(ctx: &Ctx, a: NoiseArgs) -> CmdResult {
    let v = estimate_label_noise(a.n, a.errors)?;
    println!("{v}");
    if let Some(out) = ctx.explicit_out()? {
        let mut rec = RunRecord::new("noise-estimate", ctx);
        rec.set("n", count(a.n as usize))
            .set("errors", count(a.errors as usize))
            .metric("noise_estimate", v);
        rec.write(&out)?;
    }
    Ok(())
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> CmdResult {
    let data = synth_generate_with(a.n, a.noise, ctx.seed, SynthOptions { side: a.side })?;
    let out = ctx.out_dir()?;
    std::fs::create_dir_all(out.join("images"))?;
    let ds = &data.dataset;
    let plane = a.side * a.side;
    let mut entries = Vec::with_capacity(ds.len());
    let mut truth = String::from("id,true_label\n");
    for i in 0..ds.len() {
        let px = ds.item(i);
        let img = RgbImage::from_fn(a.side as u32, a.side as u32, |x, y| {
            let o = y as usize * a.side + x as usize;
            let q = |c: usize| (px[c * plane + o].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        });
        let rel = format!("images/{}.png", ds.ids[i]);
        img.save(out.join(&rel))
            .map_err(|e| Error::Format(format!("writing {rel}: {e}")))?;
        let mut e = Entry::new(ds.ids[i].clone(), rel);
        e.label = Some(ds.labels[i] as u8);
        entries.push(e);
        truth.push_str(&format!("{},{}\n", ds.ids[i], data.true_labels[i]));
    }
    let mut manifest = Manifest::new(entries)?;
    if let Some(r) = a.ratios {
        manifest = split(&manifest, r, ctx.seed)?;
    }
    manifest.save(out.join("manifest.csv"))?;
    write_atomic(&out.join("truth.csv"), truth.as_bytes())?;

    let mut rec = RunRecord::new("synth", ctx);
    rec.set("n", count(a.n))
        .set("noise", a.noise)
        .set("side", count(a.side));
    rec.metric("positive_fraction", ds.positive_fraction())
        .metric("flipped_fraction", data.flipped_fraction());
    rec.write(&out)?;
    println!("wrote {} images and manifest.csv to {}", a.n, out.display());
    Ok(())
}

fn cmd_split(ctx: &Ctx, a: SplitArgs) -> CmdResult {
    let m = split(&Manifest::load(&a.manifest)?, a.ratios, ctx.seed)?;
    let target = match ctx.explicit_out()? {
        Some(dir) => {
            let mut rec = RunRecord::new("split", ctx);
            let (r0, r1, r2) = a.ratios;
            rec.set("manifest", path_value(&a.manifest)).set(
                "ratios",
                toml::Value::Array(vec![r0.into(), r1.into(), r2.into()]),
            );
            for (key, s) in [
                ("train", Split::Train),
                ("val", Split::Val),
                ("test", Split::Test),
            ] {
                rec.metric(key, count(m.in_split(s).count()));
            }
            rec.write(&dir)?;
            dir.join("manifest.csv")
        }
        None => a.manifest.clone(),
    };
    m.save(&target)?;
    println!(
        "train {} val {} test {} -> {}",
        m.in_split(Split::Train).count(),
        m.in_split(Split::Val).count(),
        m.in_split(Split::Test).count(),
        target.display()
    );
    Ok(())
}

fn cmd_audit(ctx: &Ctx, a: AuditArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let sample = audit_sample(&m, a.n, ctx.seed)?;
    for e in &sample {
        println!("{},{}", e.id, e.path);
    }
    if let Some(out) = ctx.explicit_out()? {
        Manifest::new(sample)?.save(out.join("audit.csv"))?;
        let mut rec = RunRecord::new("audit", ctx);
        rec.set("manifest", path_value(&a.manifest))
            .set("n", count(a.n));
        for (cat, k) in m.tally_categories() {
            log::info!("{cat}: {k}");
        }
        rec.write(&out)?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CmdResult {
    let scorer = match &a.model {
        Some(p) => {
            let mean = a.mean.as_ref().map(MeanImage::load).transpose()?;
            Some(Scorer::new(load_checkpoint(p)?, mean)?)
        }
        None => None,
    };
    let state = Arc::new(AppState::open(&a.manifest, scorer)?);
    let addr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Failure::Usage(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, addr))?;
    Ok(())
}
