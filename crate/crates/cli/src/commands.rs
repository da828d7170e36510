use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use emotalk_core::checkpoint;
use emotalk_core::data::corpus::{read_dataset, read_manifest};
use emotalk_core::data::io::{read_blendshape_csv, read_wav, write_blendshape_csv};
use emotalk_core::data::{savgol_smooth, ClipLabels};
use emotalk_core::rig::write_obj_sequence;
use emotalk_core::training::{evaluate, read_log, run, RunOptions, Trainer, CHECKPOINT_FILE, REPORT_FILE};

use crate::config::{RigConfig, RunConfig};
use crate::{ConvertArgs, EvalArgs, GenDataArgs, InferArgs, RigArgs, TrainArgs};

fn apply_rig(rig: &mut RigConfig, a: RigArgs) {
    if a.rig.is_some() {
        rig.dir = a.rig;
    }
    if a.lip_mask.is_some() {
        rig.lip_mask = a.lip_mask;
    }
    if a.eye_forehead_mask.is_some() {
        rig.eye_forehead_mask = a.eye_forehead_mask;
    }
    if let Some(m) = a.mode {
        rig.mode = m;
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    let spec = &mut cfg.dataset;
    let r = &mut spec.ranges;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(r.n_contents, a.contents);
    set!(r.n_emotions, a.emotions);
    set!(r.n_levels, a.levels);
    set!(r.n_speakers, a.speakers);
    set!(spec.clips_per_cell, a.clips_per_cell);
    set!(spec.heldout_per_cell, a.heldout_per_cell);
    set!(spec.duration_s, a.duration);
    set!(cfg.rig.vertices, a.rig_vertices);
    if let Some(seed) = a.seed {
        spec.seed = seed;
        cfg.rig.seed = seed;
    }
    spec.smooth |= a.smooth;
    cfg.validate()?;

    let out = cfg.out_dir(a.out, "dataset");
    let manifest = cfg
        .dataset
        .write(&out)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    cfg.rig.load(None)?.write_dir(&out.join("rig"))?;

    let back = read_manifest(&out)?;
    ensure!(back == manifest, "manifest did not round-trip");
    for e in &manifest.clips {
        ensure!(
            out.join(&e.wav).is_file() && out.join(&e.csv).is_file(),
            "missing files for {}",
            e.wav
        );
    }
    println!("wrote {} clips to {}", manifest.clips.len(), out.display());
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    apply_rig(&mut cfg.rig, a.rig);
    cfg.validate()?;

    let (_, data) = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    ensure!(!data.train.is_empty(), "dataset has no training clips");
    ensure!(!data.test.is_empty(), "dataset has no held-out clips to evaluate on");
    let rig = cfg.rig.load(Some(&a.data))?;
    let out = cfg.out_dir(a.out, "train");

    let mut trainer = if a.resume {
        let path = out.join(CHECKPOINT_FILE);
        let mut tr = Trainer::load(&path).with_context(|| format!("resuming from {}", path.display()))?;
        // only the run length may change on resume
        if a.epochs.is_some() {
            tr.config.epochs = cfg.train.epochs;
        }
        if a.max_steps.is_some() {
            tr.config.max_steps = cfg.train.max_steps;
        }
        tr
    } else {
        Trainer::new(&cfg.model, &cfg.train)?
    };
    let opts = RunOptions {
        checkpoint_every: a.checkpoint_every,
        stop_at: a.stop_at,
    };
    let summary = run(&mut trainer, &data.train, &out, &opts)?;

    let saved = checkpoint::read_manifest(&summary.checkpoint)?;
    ensure!(
        saved.step == trainer.step,
        "checkpoint step {} != {}",
        saved.step,
        trainer.step
    );
    let log = read_log(&summary.log)?;
    ensure!(
        log.len() as u64 == trainer.step,
        "log has {} lines for {} steps",
        log.len(),
        trainer.step
    );

    let report = evaluate(&trainer.model, &data.test, &rig, cfg.rig.mode)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    if let Some(last) = log.last() {
        println!("step {} total loss {:.6}", last.step, last.loss.total);
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn infer(mut cfg: RunConfig, a: InferArgs) -> Result<()> {
    apply_rig(&mut cfg.rig, a.rig);
    cfg.rig.validate_paths()?;
    let trainer = Trainer::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let clip = read_wav(&a.wav, ClipLabels::new(0, 0, a.level, a.style))?;
    let seq = trainer.model.infer(&clip, a.level, a.style, a.clamp)?;
    write_blendshape_csv(&a.out, &seq)?;
    ensure!(
        read_blendshape_csv(&a.out)?.frames() == seq.frames(),
        "CSV did not round-trip"
    );
    if let Some(dir) = &a.obj_dir {
        let rig = cfg.rig.load(None)?;
        let n = write_obj_sequence(dir, &rig.blend_sequence(&seq, cfg.rig.mode)?, &rig.faces)?;
        println!("wrote {n} OBJ frames to {}", dir.display());
    }
    println!("wrote {} frames to {}", seq.frames(), a.out.display());
    Ok(())
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    apply_rig(&mut cfg.rig, a.rig);
    cfg.rig.validate_paths()?;
    let trainer = Trainer::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (_, data) = read_dataset(&a.data)?;
    let split = match a.split.as_str() {
        "test" => &data.test,
        "train" => &data.train,
        other => bail!("unknown split {other:?} (train or test)"),
    };
    let rig = cfg.rig.load(Some(&a.data))?;
    let report = evaluate(&trainer.model, split, &rig, cfg.rig.mode)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn convert(mut cfg: RunConfig, a: ConvertArgs) -> Result<()> {
    apply_rig(&mut cfg.rig, a.rig);
    if let Some(seed) = a.seed {
        cfg.rig.seed = seed;
    }
    cfg.rig.validate_paths()?;
    ensure!(
        a.out.is_some() || a.csv_out.is_some(),
        "nothing to write: pass --out and/or --csv-out"
    );
    let mut seq = read_blendshape_csv(&a.input)?;
    if a.smooth {
        seq = savgol_smooth(&seq, 5, 2)?;
    }
    if let Some(path) = &a.csv_out {
        write_blendshape_csv(path, &seq)?;
    }
    if let Some(dir) = &a.out {
        let rig = cfg.rig.load(None)?;
        let n = write_obj_sequence(dir, &rig.blend_sequence(&seq, cfg.rig.mode)?, &rig.faces)?;
        println!("wrote {n} OBJ frames to {}", dir.display());
    }
    Ok(())
}
