use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ditm::corpus::{read_corpus, score_corpus, CaptionRecord, DescriptivenessTable};
use ditm::datagen::{write_synth, SynthPaths, SynthSpec};
use ditm::eval::{evaluate, write_report};
use ditm::geometry::FeatureSet;
use ditm::gradcheck::{self, GradCheckConfig};
use ditm::trainer::{Checkpoint, Dataset, TrainConfig, Trainer};

use crate::config::{
    echo, require, require_file, resolve, EvalRun, GradcheckRun, ScoreRun, SynthRun, TrainRun,
};
use crate::{
    CheckFailure, EvalArgs, FeatureArgs, GradcheckArgs, ScoreArgs, SynthArgs, SynthPreset,
    TrainArgs, TrainPreset, UsageError,
};

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_features(
    image: &mut Option<PathBuf>,
    text: &mut Option<PathBuf>,
    args: FeatureArgs,
) {
    if let Some(dir) = args.features {
        let paths = SynthPaths::in_dir(&dir);
        *image = Some(paths.image_features);
        *text = Some(paths.text_features);
    }
    set_opt(image, args.image_features);
    set_opt(text, args.text_features);
}

fn out_dir(out: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = require(out, "out")?.to_path_buf();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// A feature manifest and its binary payload (or a JSONL file).
fn require_features(value: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    let p = require_file(value, name)?;
    if p.extension().is_none_or(|e| e != "jsonl") {
        let data = FeatureSet::data_path(&p);
        if !data.is_file() {
            bail!(UsageError(format!(
                "--{name}: missing feature data {}",
                data.display()
            )));
        }
    }
    Ok(p)
}

fn read_features(path: &Path) -> anyhow::Result<FeatureSet> {
    Ok(FeatureSet::read(path)?)
}

fn read_records(path: &Path) -> anyhow::Result<Vec<CaptionRecord>> {
    Ok(read_corpus(path)?)
}

pub fn score(args: ScoreArgs) -> anyhow::Result<()> {
    let mut run = resolve(ScoreRun::default(), args.common.config.as_deref())?;
    set_opt(&mut run.corpus, args.corpus);
    set(&mut run.pool_split, args.pool_split);
    set_opt(&mut run.out, args.common.out);

    let corpus = require_file(&run.corpus, "corpus")?;
    let dir = out_dir(&run.out)?;
    let records = read_records(&corpus)?;
    let table = score_corpus(&records, run.pool_split)?;
    let path = dir.join("table.jsonl");
    table.write_jsonl(&path)?;
    echo(&dir, &run)?;
    println!(
        "scored {} sentences (pool: {}, raw range [{}, {}]) -> {}",
        table.len(),
        run.pool_split,
        table.raw_min,
        table.raw_max,
        path.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let base = match args.preset {
        Some(TrainPreset::Quick) => TrainRun {
            train: TrainConfig::quick_start(),
            ..TrainRun::default()
        },
        None => TrainRun::default(),
    };
    let mut run = resolve(base, args.common.config.as_deref())?;
    set_opt(&mut run.corpus, args.corpus);
    set_opt(&mut run.table, args.table);
    apply_features(&mut run.image_features, &mut run.text_features, args.features);
    set(&mut run.split, args.split);
    set_opt(&mut run.val_split, args.val_split);
    set_opt(&mut run.out, args.common.out);
    set_opt(&mut run.resume, args.resume);
    set_opt(&mut run.save_every, args.save_every);

    let hyper_flags = args.preset.is_some()
        || args.objective.is_some()
        || args.epochs.is_some()
        || args.batch_size.is_some()
        || args.lr.is_some()
        || args.weight_decay.is_some()
        || args.warmup_epochs.is_some()
        || args.embed_dim.is_some()
        || args.tau.is_some()
        || args.lambda.is_some()
        || args.alpha.is_some()
        || args.seed.is_some();
    let t = &mut run.train;
    set(&mut t.objective, args.objective);
    set(&mut t.epochs, args.epochs);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.lr, args.lr);
    set(&mut t.weight_decay, args.weight_decay);
    set(&mut t.warmup_epochs, args.warmup_epochs);
    set(&mut t.embed_dim, args.embed_dim);
    set(&mut t.loss.tau, args.tau);
    set(&mut t.loss.lambda, args.lambda);
    set(&mut t.loss.alpha, args.alpha);
    set(&mut t.seed, args.seed);
    if run.save_every == Some(0) {
        bail!(UsageError("--save-every must be >= 1".into()));
    }

    let corpus = require_file(&run.corpus, "corpus")?;
    let image_path = require_features(&run.image_features, "image-features")?;
    let text_path = require_features(&run.text_features, "text-features")?;
    let table_path = match &run.table {
        Some(_) => Some(require_file(&run.table, "table")?),
        None => None,
    };
    let checkpoint = match &run.resume {
        Some(_) => {
            if hyper_flags {
                bail!(UsageError(
                    "--resume uses the checkpoint's training config; drop hyperparameter flags"
                        .into()
                ));
            }
            let ck = Checkpoint::load(&require_file(&run.resume, "resume")?)?;
            run.train = ck.config.clone();
            Some(ck)
        }
        None => {
            run.train.validate().map_err(|e| UsageError(e.to_string()))?;
            None
        }
    };
    let dir = out_dir(&run.out)?;

    let records = read_records(&corpus)?;
    let table = match &table_path {
        Some(p) => DescriptivenessTable::read_jsonl(p)?,
        None => score_corpus(&records, ditm::corpus::Split::Train)?,
    };
    let images = read_features(&image_path)?;
    let texts = read_features(&text_path)?;
    let train_set = Dataset::assemble(&records, run.split, Some(&table), &images, &texts)?;
    let val_set = run
        .val_split
        .map(|s| Dataset::assemble(&records, s, Some(&table), &images, &texts))
        .transpose()?;

    echo(&dir, &run)?;
    let mut trainer = match checkpoint {
        Some(ck) => Trainer::resume(&train_set, ck)?,
        None => Trainer::new(&train_set, run.train.clone())?,
    };
    if let Some(v) = &val_set {
        trainer = trainer.with_validation(v);
    }
    let save_every = run.save_every;
    let log = trainer.run(|t, rec| {
        let val = rec
            .val_rsum
            .map(|v| format!(" val_rsum {v:.2}"))
            .unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.6}  triplet {:.6}  ordering {:.6}{val}",
            rec.epoch, rec.loss, rec.triplet, rec.ordering
        );
        if save_every.is_some_and(|n| rec.epoch % n == 0) {
            t.checkpoint()
                .save(&dir.join(format!("checkpoint_epoch{}.bin", rec.epoch)))?;
        }
        Ok(())
    })?;
    let log_path = dir.join("train_log.jsonl");
    log.write_jsonl(&log_path)?;
    let ck_path = dir.join("checkpoint.bin");
    trainer.checkpoint().save(&ck_path)?;
    println!("wrote {} and {}", ck_path.display(), log_path.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut run = resolve(EvalRun::default(), args.common.config.as_deref())?;
    set_opt(&mut run.checkpoint, args.checkpoint);
    set_opt(&mut run.corpus, args.corpus);
    apply_features(&mut run.image_features, &mut run.text_features, args.features);
    set(&mut run.split, args.split);
    set_opt(&mut run.out, args.common.out);

    let ck_path = require_file(&run.checkpoint, "checkpoint")?;
    let corpus = require_file(&run.corpus, "corpus")?;
    let image_path = require_features(&run.image_features, "image-features")?;
    let text_path = require_features(&run.text_features, "text-features")?;
    let dir = out_dir(&run.out)?;

    let model = Checkpoint::load(&ck_path)?.model;
    let records = read_records(&corpus)?;
    let images = read_features(&image_path)?;
    let texts = read_features(&text_path)?;
    let ds = Dataset::assemble(&records, run.split, None, &images, &texts)?;
    let (ei, et) = model.forward(&ds.image_feats, &ds.text_feats)?;
    let out = evaluate(
        &ei,
        &et,
        &ds.image_of_text,
        ds.levels.as_deref(),
        run.root.as_deref(),
    )?;
    write_report(&dir, &out)?;
    echo(&dir, &run)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&out.report).expect("report serializes")
    );
    Ok(())
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let base = SynthRun {
        out: None,
        spec: match args.preset {
            Some(SynthPreset::Ablation) => SynthSpec::ablation_scenario(0),
            None => SynthSpec::default(),
        },
    };
    let mut run = resolve(base, args.common.config.as_deref())?;
    set_opt(&mut run.out, args.common.out);
    let s = &mut run.spec;
    set(&mut s.n_images, args.n_images);
    set(&mut s.levels, args.levels);
    set(&mut s.shared_vocab, args.shared_vocab);
    set(&mut s.rare_vocab, args.rare_vocab);
    set(&mut s.words_per_level, args.words_per_level);
    set(&mut s.feature_dim, args.feature_dim);
    set(&mut s.noise_sigma, args.noise_sigma);
    set(&mut s.lexical_weight, args.lexical_weight);
    set(&mut s.val_fraction, args.val_fraction);
    set(&mut s.test_fraction, args.test_fraction);
    set(&mut s.seed, args.seed);
    run.spec
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;

    let dir = out_dir(&run.out)?;
    let paths = write_synth(&run.spec, &dir)?;
    echo(&dir, &run)?;
    println!(
        "wrote {}, {}, {}",
        paths.corpus.display(),
        paths.image_features.display(),
        paths.text_features.display()
    );
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let mut run = resolve(GradcheckRun::default(), args.common.config.as_deref())?;
    set_opt(&mut run.out, args.common.out);
    let g: &mut GradCheckConfig = &mut run.gradcheck;
    set(&mut g.seed, args.seed);
    set(&mut g.trials, args.trials);
    set(&mut g.loss.tau, args.tau);
    set(&mut g.loss.lambda, args.lambda);
    run.gradcheck
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;

    let report = gradcheck::run(&run.gradcheck)?;
    for r in &report.results {
        println!("{}", serde_json::to_string(r).expect("result serializes"));
    }
    if run.out.is_some() {
        let dir = out_dir(&run.out)?;
        let path = dir.join("gradcheck.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        echo(&dir, &run)?;
    }
    if !report.passed {
        let w = report.worst().expect("failed report has results");
        bail!(CheckFailure(format!(
            "gradient check failed: trial {} {:?} (mining {}) relative error {:.3e} >= {:.1e}; \
             worst coordinate {}[{}]: analytic {:.9e}, numeric {:.9e}",
            w.trial,
            w.target,
            w.hardest_mining,
            w.relative_error,
            run.gradcheck.tolerance,
            w.worst.tensor,
            w.worst.index,
            w.worst.analytic,
            w.worst.numeric
        )));
    }
    eprintln!(
        "gradient check passed: {} checks, max relative error {:.3e}",
        report.results.len(),
        report.max_relative_error
    );
    Ok(())
}
