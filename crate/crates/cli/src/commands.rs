use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use kban_core::checkpoint::Checkpoint;
use kban_core::fusion::write_triplets;
use kban_core::kb::KnowledgeBase;
use kban_core::scene::{load_scenes, write_scenes, Scene};
use kban_core::synth::{Split, SyntheticWorld};
use kban_core::training::{LogEvent, Trainer};
use kban_core::{evaluate, Error, Model, Result, RunConfig};

use crate::{Cli, Command, Common, Thresholds};

pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Generate => generate(c),
        Command::Train { resume } => train(c, resume.as_deref()),
        Command::Eval { checkpoint, scenes } => eval(c, checkpoint.as_deref(), scenes.as_deref()),
        Command::Infer {
            checkpoint,
            scenes,
            thresholds,
            dump_attention,
        } => infer(c, checkpoint.as_deref(), scenes.as_deref(), thresholds, dump_attention.as_deref()),
        Command::Inspect { checkpoint } => inspect(checkpoint),
    }
}

/// Defaults, config file, `--seed`, then `--set` overrides, validated.
fn resolve(c: &Common) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = c.seed {
        for key in ["synth.seed", "train.seed", "model.init_seed"] {
            overrides.push(format!("{key}={seed}"));
        }
    }
    overrides.extend(c.overrides.iter().cloned());
    RunConfig::resolve(c.config.as_deref(), &overrides)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn required<'a>(flag: Option<&'a Path>, configured: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    flag.or(configured.as_deref())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or paths.{what} in the config)")))
}

fn generate(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let world = SyntheticWorld::new(cfg.synth.clone())?;
    fs::create_dir_all(&c.out)?;
    for (split, count, name) in [
        (Split::Train, cfg.synth.train_scenes, "train.jsonl"),
        (Split::Val, cfg.synth.val_scenes, "val.jsonl"),
        (Split::Test, cfg.synth.test_scenes, "test.jsonl"),
    ] {
        write_scenes(&c.out.join(name), &world.split(split, count))?;
        println!("wrote {count} scenes to {}", c.out.join(name).display());
    }
    world.kb.save(&c.out.join("kb.json"))?;
    println!("wrote knowledge base to {}", c.out.join("kb.json").display());
    Ok(())
}

/// Training and validation scenes plus the knowledge base, from files when
/// `paths.train_scenes` is set and from the synthetic generator otherwise.
fn training_data(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>, KnowledgeBase)> {
    match &cfg.paths.train_scenes {
        Some(path) => {
            let kb_path = cfg
                .paths
                .kb
                .as_deref()
                .ok_or_else(|| Error::Config("paths.train_scenes needs paths.kb".into()))?;
            let val = cfg.paths.val_scenes.as_deref().map(load_scenes).transpose()?;
            Ok((load_scenes(path)?, val.unwrap_or_default(), KnowledgeBase::load(kb_path)?))
        }
        None => {
            let world = SyntheticWorld::new(cfg.synth.clone())?;
            let train = world.split(Split::Train, cfg.synth.train_scenes);
            let val = world.split(Split::Val, cfg.synth.val_scenes);
            Ok((train, val, world.kb))
        }
    }
}

fn same_kb(a: &KnowledgeBase, b: &KnowledgeBase) -> Result<()> {
    if a.num_verbs != b.num_verbs || a.num_object_classes != b.num_object_classes || a.cooccur() != b.cooccur() {
        return Err(Error::Checkpoint(format!(
            "knowledge base differs from the checkpoint's (V={}, O={} vs V={}, O={})",
            a.num_verbs, a.num_object_classes, b.num_verbs, b.num_object_classes
        )));
    }
    Ok(())
}

fn snapshot(model: &Model, trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        iteration: trainer.iteration,
        seed: trainer.config.seed,
        velocity: trainer.optimizer.velocity().map(<[Vec<f64>]>::to_vec),
    }
}

fn train(c: &Common, resume: Option<&Path>) -> Result<()> {
    let mut cfg = resolve(c)?;
    let (train_scenes, val_scenes, kb) = training_data(&cfg)?;
    if train_scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let (mut model, mut trainer) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_compatible(&cfg.model, kb.num_verbs, kb.num_object_classes)?;
            same_kb(&kb, &ckpt.model.kb)?;
            if ckpt.iteration >= cfg.train.iterations {
                return Err(Error::Config(format!(
                    "checkpoint is at iteration {}, train.iterations is {}",
                    ckpt.iteration, cfg.train.iterations
                )));
            }
            // the stored seed fixes the scene order of the remaining steps
            cfg.train.seed = ckpt.seed;
            let mut trainer = Trainer::new(cfg.train.clone())?;
            trainer.iteration = ckpt.iteration;
            if let Some(v) = ckpt.velocity {
                trainer.optimizer.set_velocity(v);
            }
            (ckpt.model, trainer)
        }
        None => (Model::new(cfg.model.clone(), kb)?, Trainer::new(cfg.train.clone())?),
    };
    for scene in train_scenes.iter().chain(&val_scenes) {
        model.check_scene(scene)?;
    }

    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let metrics_path = c.out.join("metrics.csv");
    let append = resume.is_some() && metrics_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)?;
    let mut metrics = csv::Writer::from_writer(file);
    if !append {
        metrics
            .write_record(["iteration", "loss", "interactiveness_loss", "s_c_loss", "s_r_loss", "lr"])
            .map_err(csv_error)?;
    }
    let best_path = c.out.join("best.ckpt");
    let summary = trainer.run(&mut model, &train_scenes, &val_scenes, |model, trainer, e: &LogEvent| {
        let r = &e.row;
        metrics
            .write_record([
                r.iteration.to_string(),
                r.loss.to_string(),
                r.interactiveness_loss.to_string(),
                r.s_c_loss.to_string(),
                r.s_r_loss.to_string(),
                r.lr.to_string(),
            ])
            .map_err(csv_error)?;
        metrics.flush()?;
        let val = e.val_loss.map_or_else(String::new, |v| format!("  val {v:.4}"));
        println!("iter {:>7}  loss {:.4}{val}  lr {}", r.iteration, r.loss, r.lr);
        if e.best {
            snapshot(model, trainer).save(&best_path)?;
        }
        Ok(())
    })?;
    snapshot(&model, &trainer).save(&c.out.join("final.ckpt"))?;
    if summary.stopped_early {
        println!("reached target loss at iteration {}", summary.iteration);
    }
    if let Some((it, v)) = summary.best_val {
        println!("best validation loss {v:.6} at iteration {it}");
    }
    println!("wrote {}", c.out.join("final.ckpt").display());
    Ok(())
}

/// Checkpoint and scenes for eval and infer, checked against each other.
fn load_for_inference(cfg: &RunConfig, checkpoint: Option<&Path>, scenes: Option<&Path>) -> Result<(Model, Vec<Scene>)> {
    let ckpt_path = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let scenes_path = required(scenes, &cfg.paths.scenes, "scenes")?;
    let model = Checkpoint::load(ckpt_path)?.model;
    if let Some(kb) = &cfg.paths.kb {
        same_kb(&KnowledgeBase::load(kb)?, &model.kb)?;
    }
    let scenes = load_scenes(scenes_path)?;
    for scene in &scenes {
        model.check_scene(scene)?;
    }
    Ok((model, scenes))
}

fn eval(c: &Common, checkpoint: Option<&Path>, scenes: Option<&Path>) -> Result<()> {
    let cfg = resolve(c)?;
    let (model, scenes) = load_for_inference(&cfg, checkpoint, scenes)?;
    if scenes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let detections = model.detect_all(&scenes, &cfg.inference)?;
    let report = evaluate(&detections, &scenes, model.num_verbs())?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

struct PairId {
    scene: usize,
    human: u32,
    object: u32,
}

fn parse_pair(s: &str) -> Result<PairId> {
    let bad = || Error::Config(format!("pair id {s:?} is not HUMAN:OBJECT or SCENE:HUMAN:OBJECT"));
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<u64> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let id = |v: u64| u32::try_from(v).map_err(|_| bad());
    match nums[..] {
        [h, o] => Ok(PairId {
            scene: 0,
            human: id(h)?,
            object: id(o)?,
        }),
        [s, h, o] => Ok(PairId {
            scene: usize::try_from(s).map_err(|_| bad())?,
            human: id(h)?,
            object: id(o)?,
        }),
        _ => Err(bad()),
    }
}

fn infer(
    c: &Common,
    checkpoint: Option<&Path>,
    scenes: Option<&Path>,
    flags: &Thresholds,
    dump: Option<&str>,
) -> Result<()> {
    let mut cfg = resolve(c)?;
    if let Some(t) = flags.t_human {
        cfg.inference.t_human = t;
    }
    if let Some(t) = flags.t_object {
        cfg.inference.t_object = t;
    }
    if let Some(t) = flags.suppression_threshold {
        cfg.inference.suppression_threshold = t;
    }
    cfg.validate()?;
    let pair = dump.map(parse_pair).transpose()?;
    let (model, scenes) = load_for_inference(&cfg, checkpoint, scenes)?;
    let attention = match &pair {
        Some(p) => {
            if model.config.dec_layers == 0 {
                return Err(Error::Config("model has no decoder, so there is no attention to dump".into()));
            }
            let scene = scenes
                .get(p.scene)
                .ok_or_else(|| Error::Data(format!("scene {} not in file ({} scenes)", p.scene, scenes.len())))?;
            Some(model.attention_dump(scene, p.human, p.object)?)
        }
        None => None,
    };
    let detections = model.detect_all(&scenes, &cfg.inference)?;

    fs::create_dir_all(&c.out)?;
    write_triplets(&c.out.join("detections.jsonl"), &detections)?;
    println!("wrote {} detections to {}", detections.len(), c.out.join("detections.jsonl").display());
    if let (Some(p), Some(dump)) = (pair, attention) {
        for (layer, heads) in dump.layers.iter().enumerate() {
            let path = c
                .out
                .join(format!("attention_s{}_h{}_o{}_layer{layer}.csv", p.scene, p.human, p.object));
            let mut w = csv::Writer::from_path(&path).map_err(csv_error)?;
            w.write_record(["layer", "head", "verb", "instance_id", "weight"]).map_err(csv_error)?;
            for (head, weights) in heads.iter().enumerate() {
                let cols = dump.instance_ids.len();
                for (row, verb) in dump.verbs.iter().enumerate() {
                    for (col, id) in dump.instance_ids.iter().enumerate() {
                        w.write_record([
                            layer.to_string(),
                            head.to_string(),
                            verb.to_string(),
                            id.to_string(),
                            weights.data()[row * cols + col].to_string(),
                        ])
                        .map_err(csv_error)?;
                    }
                }
            }
            w.flush()?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let m = &ckpt.model;
    let c = &m.config;
    println!("format      KBAN v{}", kban_core::checkpoint::VERSION);
    println!("enc_layers  {}", c.enc_layers);
    println!("dec_layers  {}", c.dec_layers);
    println!("dim         {}", c.dim);
    println!("heads       {}", c.heads);
    println!("verbs       {}", m.kb.num_verbs);
    println!("classes     {}", m.kb.num_object_classes);
    println!("d_app       {}", c.appearance_dim);
    println!("sc_hidden   {}", c.sc_hidden);
    println!("knowledge   {}", c.knowledge_augmentation);
    println!("layer_norm  {}", c.layer_norm);
    println!("iteration   {}", ckpt.iteration);
    println!("seed        {}", ckpt.seed);
    println!("velocity    {}", if ckpt.velocity.is_some() { "stored" } else { "none" });
    println!("tensors:");
    for (name, t) in m.params.iter() {
        println!("  {name} {:?} {}", t.shape(), t.len());
    }
    println!("parameters  {}", m.count_params(""));
    Ok(())
}
