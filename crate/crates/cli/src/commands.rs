use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stmoe_core::bench::{run_bench, BenchConfig};
use stmoe_core::checkpoint::Checkpoint;
use stmoe_core::data::{
    batch_iter, read_dataset, synth_generate, write_dataset, Batch, MotionSequence, Normalizer, SynthSpec,
};
use stmoe_core::features::{self, FeatureRow};
use stmoe_core::model::{ModelConfig, StMoeModel};
use stmoe_core::nn::Mode;
use stmoe_core::objective::MetricReport;
use stmoe_core::tensor::no_grad;
use stmoe_core::train::{evaluate, predict, Trainer};
use stmoe_core::{Error, Tensor};

use crate::config::{echo, load_run_config, load_toml, RunConfig};
use crate::failure::{usage, Failure};

type Outcome = Result<(), Failure>;

/// Options shared by every command that reads a run config.
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunOptions {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let cfg = load_run_config(self.config.as_deref())?.resolve(self.seed, self.out_dir.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_dataset(path: &Path) -> Result<Vec<MotionSequence>, Failure> {
    if !path.is_file() {
        return Err(usage(format!("dataset not found: {}", path.display())));
    }
    let (_, seqs) = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if seqs.is_empty() {
        return Err(usage(format!("dataset {} holds no sequences", path.display())));
    }
    Ok(seqs)
}

/// Rejects datasets whose shape cannot feed a model with config `c`.
fn check_dataset(seqs: &[MotionSequence], c: &ModelConfig, path: &Path) -> Outcome {
    let first = &seqs[0];
    if first.joints != c.joints {
        return Err(usage(format!(
            "{}: dataset has {} joints, model expects {}",
            path.display(),
            first.joints,
            c.joints
        )));
    }
    if c.scene_concat && first.persons != c.persons {
        return Err(usage(format!(
            "{}: dataset has {} persons, model expects {}",
            path.display(),
            first.persons,
            c.persons
        )));
    }
    if let Some((i, s)) = seqs.iter().enumerate().find(|(_, s)| s.frames < c.total) {
        return Err(usage(format!(
            "{}: sequence {i} has {} frames but the model needs T = {}",
            path.display(),
            s.frames,
            c.total
        )));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<StMoeModel, Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    let cp = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(cp.restore_model()?)
}

fn normalized_history(history: &Tensor, norm: &Normalizer) -> stmoe_core::Result<Tensor> {
    norm.normalize(history, &norm.offsets(history)?)
}

pub fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Outcome {
    let mut spec: SynthSpec = spec.map_or_else(|| Ok(SynthSpec::default()), load_toml)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let seqs = synth_generate(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = write_dataset(out, &seqs).with_context(|| format!("writing {}", out.display()))?;
    let name = out
        .file_name()
        .map_or("dataset".into(), |n| n.to_string_lossy().into_owned());
    echo(
        out.parent().unwrap_or(Path::new(".")),
        &format!("{name}.spec.toml"),
        &spec,
    )?;
    println!("wrote {} sequences, {bytes} bytes to {}", seqs.len(), out.display());
    Ok(())
}

pub fn train(opts: &RunOptions) -> Outcome {
    let cfg = opts.resolve()?;
    let train_path = cfg
        .data
        .train
        .as_deref()
        .ok_or_else(|| usage("data.train is not set"))?;
    let train = load_dataset(train_path)?;
    check_dataset(&train, &cfg.model, train_path)?;
    let val = match cfg.data.val.as_deref() {
        Some(p) => {
            let v = load_dataset(p)?;
            check_dataset(&v, &cfg.model, p)?;
            v
        }
        None => Vec::new(),
    };
    let dir = &cfg.out_dir;
    echo(dir, "config.toml", &cfg)?;
    let log = dir.join("train_log.jsonl");
    if log.exists() {
        fs::remove_file(&log)?;
    }
    let model = StMoeModel::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss)?;
    let epochs = cfg.train.epochs;
    trainer.fit(&train, &val, epochs, Some(dir), &mut |r, _| {
        let mut line = format!(
            "epoch {}/{epochs} lr {:.6} train_loss {:.6}",
            r.epoch, r.lr, r.train_loss
        );
        if let (Some(j), Some(a)) = (r.val_jpe, r.val_ape) {
            line.push_str(&format!(" val_jpe {j:.3} val_ape {a:.3}"));
        }
        println!("{line}");
        Ok(())
    })?;
    let final_path = dir.join("final.stmc");
    trainer.checkpoint().save(&final_path)?;
    println!("saved {}", final_path.display());
    Ok(())
}

/// JPE/APE table of `model` over `seqs` at the configured horizons.
fn metric_report(model: &StMoeModel, seqs: &[MotionSequence], cfg: &RunConfig) -> Result<MetricReport, Failure> {
    let fps = cfg.eval.fps.unwrap_or(seqs[0].fps as f64);
    let acc = evaluate(model, seqs, cfg.eval.batch_size, &cfg.train.normalizer)?;
    acc.report(fps, &cfg.eval.horizons).map_err(|e| match e {
        Error::Invalid(m) => usage(m),
        e => e.into(),
    })
}

pub fn eval(opts: &RunOptions, checkpoint: &Path, dataset: &Path) -> Outcome {
    let cfg = opts.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let seqs = load_dataset(dataset)?;
    check_dataset(&seqs, &model.config, dataset)?;
    let table = metric_report(&model, &seqs, &cfg)?.to_csv();
    echo(&cfg.out_dir, "eval_config.toml", &cfg)?;
    let path = cfg.out_dir.join("eval_metrics.csv");
    fs::write(&path, &table)?;
    print!("{table}");
    Ok(())
}

pub fn predict_cmd(opts: &RunOptions, checkpoint: &Path, dataset: &Path, out: &Path) -> Outcome {
    let cfg = opts.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let seqs = load_dataset(dataset)?;
    check_dataset(&seqs, &model.config, dataset)?;
    let (t, total) = (model.config.history, model.config.total);
    let mut written = Vec::with_capacity(seqs.len());
    for batch in batch_iter(&seqs, cfg.eval.batch_size, t, total, None)? {
        let pred = predict(&model, &batch.history, &cfg.train.normalizer)?;
        let (m, d) = (batch.persons, batch.joints * 3);
        for (bi, &i) in batch.indices.iter().enumerate() {
            let src = &seqs[i];
            let mut positions = vec![0f32; m * total * d];
            for p in 0..m {
                let row = &pred.data()[(bi * m + p) * d * total..(bi * m + p + 1) * d * total];
                for f in 0..total {
                    for k in 0..d {
                        positions[(p * total + f) * d + k] = if f < t {
                            src.positions[(p * src.frames + f) * d + k]
                        } else {
                            row[k * total + f] as f32
                        };
                    }
                }
            }
            written.push(MotionSequence::new(m, total, batch.joints, src.fps, positions)?);
        }
    }
    let bytes = write_dataset(out, &written).with_context(|| format!("writing {}", out.display()))?;
    echo(&cfg.out_dir, "predict_config.toml", &cfg)?;
    println!(
        "wrote {} sequences ({t} observed + {} predicted frames), {bytes} bytes to {}",
        written.len(),
        total - t,
        out.display()
    );
    Ok(())
}

pub fn inspect_routing(opts: &RunOptions, checkpoint: &Path, dataset: &Path, out: &Path) -> Outcome {
    let cfg = opts.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let seqs = load_dataset(dataset)?;
    check_dataset(&seqs, &model.config, dataset)?;
    let c = &model.config;
    let layers = model.layers.len();
    let mut mass = vec![vec![0.0f64; c.n_experts]; layers];
    let mut lines = String::new();
    let mut sample = 0;
    for batch in batch_iter(&seqs, cfg.eval.batch_size, c.history, c.total, None)? {
        let history = normalized_history(&batch.history, &cfg.train.normalizer)?;
        let routing = no_grad(|| model.forward(&history, &mut Mode::Eval))?.routing;
        let rows = routing.first().map_or(0, |r| r.decisions.len());
        for (l, r) in routing.iter().enumerate() {
            for (i, d) in r.decisions.iter().enumerate() {
                lines.push_str(&d.to_line(sample + i, l));
                lines.push('\n');
                for (e, w) in d.weights.iter().enumerate() {
                    mass[l][e] += w;
                }
            }
        }
        sample += rows;
    }
    fs::write(out, &lines).with_context(|| format!("writing {}", out.display()))?;
    let mut summary = String::from("layer,slot,kind,weight_mass\n");
    for (l, row) in mass.iter().enumerate() {
        for (e, m) in row.iter().enumerate() {
            summary.push_str(&format!("{l},{e},{},{m:.6}\n", model.layers[l].pool[e]));
        }
    }
    let total: f64 = mass.iter().flatten().sum();
    summary.push_str(&format!("# total {total:.6} = {sample} samples x {layers} layers\n"));
    echo(&cfg.out_dir, "inspect_routing_config.toml", &cfg)?;
    fs::write(cfg.out_dir.join("routing_summary.csv"), &summary)?;
    print!("{summary}");
    println!("wrote {} records to {}", sample * layers, out.display());
    Ok(())
}

pub fn export_features(opts: &RunOptions, checkpoint: &Path, dataset: &Path, out: &Path, samples: usize) -> Outcome {
    let cfg = opts.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let seqs = load_dataset(dataset)?;
    check_dataset(&seqs, &model.config, dataset)?;
    let c = &model.config;
    let batches = batch_iter(&seqs, cfg.eval.batch_size, c.history, c.total, None)?;
    // one model row per scene under scene_concat, otherwise one per person
    let rows_per_batch = |b: &Batch| {
        if c.scene_concat {
            b.indices.len()
        } else {
            b.indices.len() * b.persons
        }
    };
    let available: usize = batches.iter().map(rows_per_batch).sum();
    let take = samples.min(available);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut chosen = rand::seq::index::sample(&mut rng, available, take).into_vec();
    chosen.sort_unstable();
    let mut rows = Vec::with_capacity(take * c.n_experts * model.layers.len());
    let (mut start, mut next) = (0usize, 0usize);
    for batch in &batches {
        let n = rows_per_batch(batch);
        let end = chosen[next..].iter().take_while(|&&s| s < start + n).count() + next;
        if end > next {
            let history = normalized_history(&batch.history, &cfg.train.normalizer)?;
            let outs = no_grad(|| model.expert_outputs(&history))?;
            for &s in &chosen[next..end] {
                for (l, layer_outs) in outs.iter().enumerate() {
                    for (slot, x) in layer_outs.iter().enumerate() {
                        rows.push(FeatureRow {
                            sample: u32::try_from(s).context("sample index exceeds u32")?,
                            layer: l as u32,
                            slot: slot as u32,
                            kind: model.layers[l].pool[slot].index() as u32,
                            values: features::pool(x, s - start),
                        });
                    }
                }
            }
            next = end;
        }
        start += n;
    }
    let bytes = features::encode(&rows, model.layers.len() as u32, c.n_experts as u32)?;
    fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    echo(&cfg.out_dir, "export_features_config.toml", &cfg)?;
    let width = rows.first().map_or(0, |r| r.values.len());
    println!(
        "wrote {} rows ({take} of {available} samples x {} layers x {} experts), width {width}, to {}",
        rows.len(),
        model.layers.len(),
        c.n_experts,
        out.display()
    );
    Ok(())
}

pub fn bench(config: Option<&Path>, out_dir: &Path) -> Outcome {
    let cfg: BenchConfig = config.map_or_else(|| Ok(BenchConfig::default()), load_toml)?;
    let report = run_bench(&cfg)?;
    let table = report.to_table();
    echo(out_dir, "bench_config.toml", &cfg)?;
    fs::write(out_dir.join("bench.csv"), &table)?;
    print!("{table}");
    Ok(())
}
