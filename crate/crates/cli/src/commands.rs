//! Implementations of the six subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use actseg_core::data::{
    generate_synthetic, load_features_auto, load_label_file, load_labels, load_manifest,
    write_features, write_labels, write_manifest, ClassMap, DataError, ManifestEntry,
    SyntheticSpec,
};
use actseg_core::metrics::{DatasetEval, EvalReport, MetricsError};
use actseg_core::model::{
    argmax_rows, closed_form_score_count, load_checkpoint, per_block_score_count, save_checkpoint,
    CheckpointError, Model, ModelConfig, ModelError, MAX_BLOCK_INDEX,
};
use actseg_core::train::{fit, EpochStats, TrainConfig, TrainError};
use actseg_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::config::{FileConfig, ModelOverrides};
use crate::{
    BenchAttnArgs, CliError, DumpAttnArgs, EvalArgs, GenSynthArgs, PredictArgs, Result, TrainArgs,
};

/// Global flags plus the loaded `--config` document.
pub struct Context {
    pub file: FileConfig,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.or(self.file.seed).unwrap_or(0)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| self.file.out.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| {
            CliError::Config(format!("cannot create output directory {}: {e}", dir.display()))
        })?;
        Ok(dir)
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::InvalidSpec(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
        ModelError::FeatureDimMismatch { .. } | ModelError::ClassCountMismatch { .. } => {
            CliError::Dimension(e.to_string())
        }
        _ => CliError::Internal(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::EmptyDataset | TrainError::LabelCountMismatch { .. } => {
            CliError::Data(e.to_string())
        }
        TrainError::Sequence {
            source: ModelError::FeatureDimMismatch { .. },
            ..
        } => CliError::Dimension(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    }
}

fn checkpoint_err(e: CheckpointError) -> CliError {
    CliError::Data(e.to_string())
}

fn metrics_err(e: MetricsError) -> CliError {
    match e {
        MetricsError::InvalidThreshold(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn file_stem(path: &Path) -> &str {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("output")
}

/// Resolved settings written next to the checkpoint, so a run can be
/// reproduced from its output directory alone.
#[derive(Serialize)]
struct ResolvedRunConfig<'a> {
    seed: u64,
    manifest: &'a Path,
    classes: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let manifest_path = args
        .manifest
        .clone()
        .or_else(|| ctx.file.manifest.clone())
        .ok_or_else(|| {
            CliError::Config("no dataset manifest given (use --manifest or the config file)".into())
        })?;
    require_exists(&manifest_path, "manifest")?;
    let classes_path = args
        .classes
        .clone()
        .or_else(|| ctx.file.classes.clone())
        .ok_or_else(|| {
            CliError::Config("no class map given (use --classes or the config file)".into())
        })?;
    require_exists(&classes_path, "class map")?;

    let classes = ClassMap::load(&classes_path).map_err(data_err)?;
    let entries = load_manifest(&manifest_path).map_err(data_err)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "{}: manifest lists no sequences",
            manifest_path.display()
        )));
    }

    let mut dataset: Vec<(Tensor<f32>, Vec<usize>)> = Vec::with_capacity(entries.len());
    let mut feature_dim: Option<usize> = None;
    for entry in &entries {
        require_exists(&entry.features, "feature file")?;
        require_exists(&entry.labels, "label file")?;
        let seq = load_features_auto(&entry.features).map_err(data_err)?;
        let labels = load_labels(&entry.labels, &classes, seq.frames()).map_err(data_err)?;
        match feature_dim {
            None => feature_dim = Some(seq.dim()),
            Some(d) if d != seq.dim() => {
                return Err(CliError::Dimension(format!(
                    "feature dimension mismatch: {} has {}, the first sequence has {d}",
                    entry.features.display(),
                    seq.dim()
                )))
            }
            Some(_) => {}
        }
        dataset.push((seq.to_tensor::<f32>(), labels));
    }
    let feature_dim = feature_dim.expect("manifest is non-empty");

    let mut model_config = ModelConfig::new(feature_dim, classes.len());
    ctx.file.model.apply(&mut model_config);
    ModelOverrides {
        num_blocks: args.num_blocks,
        num_decoders: args.num_decoders,
        model_dim: args.model_dim,
        input_dropout: args.input_dropout,
        alpha_decay: args.alpha_decay,
        lambda: args.lambda,
        ..ModelOverrides::default()
    }
    .apply(&mut model_config);
    if model_config.feature_dim != feature_dim {
        return Err(CliError::Dimension(format!(
            "feature dimension mismatch: config says {}, the dataset has {feature_dim}",
            model_config.feature_dim
        )));
    }
    if model_config.num_classes != classes.len() {
        return Err(CliError::Dimension(format!(
            "class count mismatch: config says {}, the class map has {}",
            model_config.num_classes,
            classes.len()
        )));
    }
    model_config.validate().map_err(model_err)?;

    let mut train_config = TrainConfig::default();
    ctx.file.train.apply(&mut train_config);
    if let Some(v) = args.epochs {
        train_config.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        train_config.learning_rate = v;
    }

    let seed = ctx.seed();
    let out = ctx.out_dir()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let model = Model::<f32>::init(model_config.clone(), &mut rng).map_err(model_err)?;
    let log = fit(&model, &dataset, &train_config, &mut rng).map_err(train_err)?;

    let checkpoint_path = out.join("model.ckpt");
    save_checkpoint(&model, &checkpoint_path).map_err(checkpoint_err)?;
    let log_path = out.join("train_log.csv");
    write_train_log(&log_path, &log)?;
    let snapshot = ResolvedRunConfig {
        seed,
        manifest: &manifest_path,
        classes: &classes_path,
        model: &model_config,
        train: &train_config,
    };
    let snapshot_path = out.join("run_config.json");
    let json = serde_json::to_string_pretty(&snapshot)
        .map_err(|e| CliError::Internal(format!("cannot serialize run config: {e}")))?;
    fs::write(&snapshot_path, json)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", snapshot_path.display())))?;

    match log.last() {
        Some(s) => println!(
            "trained {} epochs on {} sequences: loss {:.4}, train accuracy {:.2}%",
            log.len(),
            dataset.len(),
            s.total_loss,
            s.train_acc
        ),
        None => println!("trained 0 epochs: the checkpoint holds the initialization"),
    }
    println!("wrote {}", checkpoint_path.display());
    println!("wrote {}", log_path.display());
    println!("wrote {}", snapshot_path.display());
    Ok(())
}

fn write_train_log(path: &Path, log: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,total_loss,cls_loss,smo_loss,train_acc\n");
    for row in log {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.total_loss, row.cls_loss, row.smo_loss, row.train_acc
        ));
    }
    fs::write(path, text)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

pub fn predict(ctx: &Context, args: &PredictArgs) -> Result<()> {
    require_exists(&args.checkpoint, "checkpoint")?;
    require_exists(&args.features, "feature file")?;
    require_exists(&args.classes, "class map")?;
    let model: Model<f32> = load_checkpoint(&args.checkpoint).map_err(checkpoint_err)?;
    let classes = ClassMap::load(&args.classes).map_err(data_err)?;
    let seq = load_features_auto(&args.features).map_err(data_err)?;
    if seq.dim() != model.config().feature_dim {
        return Err(CliError::Dimension(format!(
            "feature dimension mismatch: checkpoint expects {}, {} has {}",
            model.config().feature_dim,
            args.features.display(),
            seq.dim()
        )));
    }
    if classes.len() != model.config().num_classes {
        return Err(CliError::Dimension(format!(
            "class count mismatch: checkpoint has {}, the class map has {}",
            model.config().num_classes,
            classes.len()
        )));
    }

    let mut tape = Tape::inference();
    let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed());
    let output = model
        .forward(&mut tape, &seq.to_tensor::<f32>(), false, &mut rng, None)
        .map_err(model_err)?;

    let out = ctx.out_dir()?;
    let stem = file_stem(&args.features);
    let final_path = out.join(format!("{stem}.labels"));
    write_labels(&final_path, &argmax_rows(output.final_logits()), &classes).map_err(data_err)?;
    println!("wrote {}", final_path.display());
    if args.all_stages {
        // the final stage already owns the main output file; earlier
        // stages get one file each
        for stage in &output.stages[..output.stages.len() - 1] {
            let path = out.join(format!("{stem}.{}.labels", stage.name));
            write_labels(&path, &argmax_rows(&stage.logits), &classes).map_err(data_err)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    if args.preds.len() != args.gts.len() {
        return Err(CliError::Config(format!(
            "each --pred needs a matching --gt: got {} predictions, {} ground truths",
            args.preds.len(),
            args.gts.len()
        )));
    }
    require_exists(&args.classes, "class map")?;
    let classes = ClassMap::load(&args.classes).map_err(data_err)?;

    let mut aggregate = DatasetEval::new();
    let mut rows: Vec<(String, EvalReport)> = Vec::with_capacity(args.preds.len());
    for (pred_path, gt_path) in args.preds.iter().zip(&args.gts) {
        require_exists(pred_path, "prediction file")?;
        require_exists(gt_path, "ground-truth file")?;
        let pred = load_label_file(pred_path, &classes).map_err(data_err)?;
        let gt = load_label_file(gt_path, &classes).map_err(data_err)?;
        if pred.len() != gt.len() {
            return Err(CliError::Data(format!(
                "length mismatch: {} has {} frames, {} has {}",
                pred_path.display(),
                pred.len(),
                gt_path.display(),
                gt.len()
            )));
        }
        let report = aggregate.add(&pred, &gt).map_err(metrics_err)?;
        rows.push((file_stem(pred_path).to_string(), report));
    }
    let overall = aggregate.report();

    println!(
        "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "video", "acc", "edit", "f1@10", "f1@25", "f1@50"
    );
    let print_row = |name: &str, r: &EvalReport| {
        println!(
            "{name:<24} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.accuracy, r.edit, r.f1[0], r.f1[1], r.f1[2]
        );
    };
    for (name, report) in &rows {
        print_row(name, report);
    }
    print_row("overall", &overall);

    let out = ctx.out_dir()?;
    let csv_path = out.join("eval.csv");
    let mut text = String::from("video,acc,edit,f1@10,f1@25,f1@50\n");
    let mut csv_row = |name: &str, r: &EvalReport| {
        text.push_str(&format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.accuracy, r.edit, r.f1[0], r.f1[1], r.f1[2]
        ));
    };
    for (name, report) in &rows {
        csv_row(name, report);
    }
    csv_row("overall", &overall);
    fs::write(&csv_path, text)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", csv_path.display())))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

pub fn bench_attn(ctx: &Context, args: &BenchAttnArgs) -> Result<()> {
    if args.frames < 2 {
        return Err(CliError::Config(format!(
            "need at least 2 frames; got {}",
            args.frames
        )));
    }
    if args.blocks < 1 || args.blocks > MAX_BLOCK_INDEX {
        return Err(CliError::Config(format!(
            "block count must be in [1, {MAX_BLOCK_INDEX}]; got {}",
            args.blocks
        )));
    }
    if args.model_dim < 1 {
        return Err(CliError::Config("model dimension must be at least 1".into()));
    }

    // encoder only: decoders reuse the same attention primitive, so the
    // encoder's counters are the whole story
    let mut config = ModelConfig::new(args.model_dim, 2);
    config.num_blocks = args.blocks;
    config.num_decoders = 0;
    config.model_dim = args.model_dim;
    config.input_dropout = 0.0;
    let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed());
    let model = Model::<f32>::init(config, &mut rng).map_err(model_err)?;
    let values: Vec<f32> = (0..args.frames * args.model_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let input = Tensor::from_vec(args.frames, args.model_dim, values)
        .map_err(|e| CliError::Internal(e.to_string()))?;

    let started = Instant::now();
    let mut tape = Tape::inference();
    let output = model
        .forward(&mut tape, &input, false, &mut rng, None)
        .map_err(model_err)?;
    let elapsed = started.elapsed().as_secs_f64();

    let mut measured_total = 0u64;
    let mut per_block = Vec::with_capacity(args.blocks);
    for (index, block) in output.encoder_blocks.iter().enumerate() {
        let expected = per_block_score_count(args.frames, index + 1);
        if block.scores_materialized != expected {
            return Err(CliError::Internal(format!(
                "block {}: instrumented count {} disagrees with closed form {expected}",
                index + 1,
                block.scores_materialized
            )));
        }
        measured_total += block.scores_materialized;
        per_block.push((index + 1, block.window, block.scores_materialized));
    }
    let closed_total = closed_form_score_count(args.frames, args.blocks);
    if measured_total != closed_total {
        return Err(CliError::Internal(format!(
            "instrumented total {measured_total} disagrees with closed form {closed_total}"
        )));
    }

    let full_total = args.blocks as u64 * (args.frames as u64).pow(2);
    let ratio = full_total as f64 / measured_total as f64;
    // measured = (2 - epsilon) * 2^J * T; epsilon is the boundary slack
    let budget = (1u64 << args.blocks) as f64 * args.frames as f64;
    let epsilon = 2.0 - measured_total as f64 / budget;

    println!(
        "attention scores for T={} frames, J={} blocks (forward pass {elapsed:.2}s)",
        args.frames, args.blocks
    );
    println!("{:>5} {:>8} {:>14}", "block", "window", "scores");
    for (block, window, scores) in &per_block {
        println!("{block:>5} {window:>8} {scores:>14}");
    }
    println!("materialized total: {measured_total} (matches the closed form)");
    println!("full attention J*T*T: {full_total}");
    println!("ratio full/windowed: {ratio:.1}");
    println!("epsilon vs 2*2^J*T budget: {epsilon:.4}");

    let out = ctx.out_dir()?;
    let csv_path = out.join("bench_attn.csv");
    let mut text = String::from("block,window,scores\n");
    for (block, window, scores) in &per_block {
        text.push_str(&format!("{block},{window},{scores}\n"));
    }
    text.push_str(&format!("total,,{measured_total}\n"));
    fs::write(&csv_path, text)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", csv_path.display())))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

pub fn dump_attn(ctx: &Context, args: &DumpAttnArgs) -> Result<()> {
    require_exists(&args.checkpoint, "checkpoint")?;
    require_exists(&args.features, "feature file")?;
    let model: Model<f32> = load_checkpoint(&args.checkpoint).map_err(checkpoint_err)?;
    let seq = load_features_auto(&args.features).map_err(data_err)?;
    if seq.dim() != model.config().feature_dim {
        return Err(CliError::Dimension(format!(
            "feature dimension mismatch: checkpoint expects {}, {} has {}",
            model.config().feature_dim,
            args.features.display(),
            seq.dim()
        )));
    }
    if args.frame >= seq.frames() {
        return Err(CliError::Config(format!(
            "frame {} out of range [0, {})",
            args.frame,
            seq.frames()
        )));
    }

    let mut tape = Tape::inference();
    let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed());
    let output = model
        .forward(&mut tape, &seq.to_tensor::<f32>(), false, &mut rng, Some(args.frame))
        .map_err(model_err)?;

    let out = ctx.out_dir()?;
    for (index, block) in output.encoder_blocks.iter().enumerate() {
        let row = block
            .anchor_row
            .as_ref()
            .ok_or_else(|| CliError::Internal(format!("block {}: no anchor row captured", index + 1)))?;
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CliError::Internal(format!(
                "block {}: attention row sums to {sum}, expected 1",
                index + 1
            )));
        }
        let normalized = min_max_normalize(row);
        let path = out.join(format!("attn_block{}.csv", index + 1));
        let mut text = String::from("frame,weight\n");
        for (t, w) in normalized.iter().enumerate() {
            text.push_str(&format!("{t},{w}\n"));
        }
        fs::write(&path, text)
            .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))?;
        println!("block {} (window {}): wrote {}", index + 1, block.window, path.display());
    }
    Ok(())
}

/// `(x - min) / (max - min)` over the whole row; a constant row maps to
/// all zeros.
fn min_max_normalize(row: &[f32]) -> Vec<f32> {
    let min = row.iter().copied().fold(f32::INFINITY, f32::min);
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return vec![0.0; row.len()];
    }
    row.iter().map(|&v| (v - min) / (max - min)).collect()
}

pub fn gen_synth(ctx: &Context, args: &GenSynthArgs) -> Result<()> {
    if args.sequences == 0 {
        return Err(CliError::Config("need at least one sequence".into()));
    }
    if args.num_classes < 2 {
        return Err(CliError::Config(format!(
            "need at least 2 classes; got {}",
            args.num_classes
        )));
    }
    let spec = SyntheticSpec {
        min_len: args.min_len,
        max_len: args.max_len,
        noise_sigma: args.noise_sigma,
        mean_scale: args.mean_scale,
        seed: ctx.seed(),
        ..SyntheticSpec::uniform(args.num_classes, args.feature_dim)
    };
    spec.validate().map_err(data_err)?;
    let data = generate_synthetic(&spec, args.sequences, (args.min_frames, args.max_frames))
        .map_err(data_err)?;

    let out = ctx.out_dir()?;
    let names: Vec<String> = (0..args.num_classes).map(|i| format!("act{i}")).collect();
    let classes = ClassMap::from_names(names).map_err(data_err)?;
    let classes_path = out.join("classes.txt");
    classes.write(&classes_path).map_err(data_err)?;

    let mut entries = Vec::with_capacity(data.len());
    for (i, (seq, labels)) in data.iter().enumerate() {
        let features = format!("seq{i:03}.feat");
        let labels_name = format!("seq{i:03}.labels");
        write_features(&out.join(&features), seq).map_err(data_err)?;
        write_labels(&out.join(&labels_name), labels, &classes).map_err(data_err)?;
        entries.push(ManifestEntry {
            features: features.into(),
            labels: labels_name.into(),
        });
    }
    let manifest_path = out.join("manifest.json");
    write_manifest(&manifest_path, &entries).map_err(data_err)?;

    let total_frames: usize = data.iter().map(|(seq, _)| seq.frames()).sum();
    println!(
        "wrote {} sequences ({} classes, {}-d features, {total_frames} frames) to {}",
        data.len(),
        args.num_classes,
        args.feature_dim,
        out.display()
    );
    println!("wrote {}", classes_path.display());
    println!("wrote {}", manifest_path.display());
    Ok(())
}
