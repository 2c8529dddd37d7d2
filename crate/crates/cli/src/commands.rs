use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vitprune::analysis::{attention_diversity, report, write_diversity, write_report};
use vitprune::checkpoint::{write_atomic, Checkpoint, Counters};
use vitprune::config::write_arch;
use vitprune::data::Dataset;
use vitprune::events::{read_json_lines, JsonLines};
use vitprune::lut::{
    analytic_lut, profile, AnalyticRunner, BlockRunner, LatencyLut, RunnerKind, WallClockRunner,
};
use vitprune::model::{count_flops, count_params, ArchSpec, MaskSet, Vit};
use vitprune::nvit::{compare_trend, generate};
use vitprune::optim::AdamW;
use vitprune::pruner::{self, compare_schemes, replay, PruneEvent, PruneInputs};
use vitprune::sparsity::{sparsify_model, verify_model};
use vitprune::train::{evaluate, train, EpochStats, OptimConfig, Supervision, Teacher};
use vitprune::{Error, Result};

use crate::Run;

/// Reported with every accuracy so readers know the data pipeline.
const AUGMENTATION: &str = "random horizontal flip only";

pub fn dispatch(run: &Run) -> Result<()> {
    info!("{} -> {}", run.command, run.out().display());
    match run.command {
        "train" => cmd_train(run),
        "prune" => cmd_prune(run),
        "finetune" => cmd_finetune(run),
        "generate" => cmd_generate(run),
        "profile" => cmd_profile(run),
        "sparsify" => cmd_sparsify(run),
        "analyze" => cmd_analyze(run),
        "eval" => cmd_eval(run),
        other => Err(Error::config(
            "command",
            format!("unknown command `{other}`"),
        )),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn load_input(run: &Run) -> Result<Checkpoint> {
    let p = run
        .cfg
        .run
        .input
        .as_ref()
        .ok_or_else(|| Error::config("run.input", "missing input checkpoint"))?;
    Checkpoint::load(p)
}

fn input_masks(ck: &Checkpoint) -> Option<&MaskSet> {
    (!ck.masks.is_full()).then_some(&ck.masks)
}

fn teacher(run: &Run) -> Result<Teacher> {
    Ok(match &run.cfg.loss.teacher {
        Some(p) => Teacher::Model(Box::new(Checkpoint::load(p)?.model)),
        None => Teacher::Labels,
    })
}

fn full_teacher(run: &Run) -> Result<Option<Vit>> {
    run.cfg
        .loss
        .full_teacher
        .as_ref()
        .map(|p| Checkpoint::load(p).map(|c| c.model))
        .transpose()
}

fn lut_for(run: &Run, spec: &ArchSpec) -> Result<LatencyLut> {
    match &run.cfg.lut.path {
        Some(p) => LatencyLut::load(p),
        None => analytic_lut(
            &run.cfg.lut.grid.grid(),
            run.cfg.lut.batch_size,
            spec.num_tokens(),
        ),
    }
}

/// Trains in place, logging each epoch to `metrics.jsonl`.
#[allow(clippy::too_many_arguments)]
fn fit(
    run: &Run,
    stage: &str,
    vit: &mut Vit,
    masks: Option<&MaskSet>,
    data: &Dataset,
    optim: &OptimConfig,
    sup: &Supervision,
    sparsity: Option<&vitprune::sparsity::SparsityMasks>,
) -> Result<(AdamW, Vec<EpochStats>)> {
    let mut opt = AdamW::new(optim.adam, vit);
    let mut metrics = JsonLines::append(&run.path("metrics.jsonl"))?;
    let mut err = None;
    let stats = train(
        vit,
        &mut opt,
        masks,
        data,
        optim,
        sup,
        sparsity,
        run.cfg.run.seed,
        &mut |s| {
            info!(
                "{stage} epoch {} loss {:.4} train_acc {:.4} lr {:.2e}",
                s.epoch, s.loss, s.train_acc, s.lr
            );
            if let Err(e) = metrics.write(&json!({ "stage": stage, "epoch": s })) {
                err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((opt, stats))
}

fn save(
    run: &Run,
    mut ck: Checkpoint,
    name: &str,
    test_acc: f64,
    stats: &[EpochStats],
) -> Result<()> {
    ck.config_hash = run.hash.clone();
    ck.metrics.insert("test_acc".into(), test_acc);
    if let Some(last) = stats.last() {
        ck.metrics.insert("train_acc".into(), last.train_acc);
        ck.metrics.insert("loss".into(), last.loss);
    }
    let path = run.path(name);
    ck.save(&path)?;
    info!("wrote {} (test_acc {:.4})", path.display(), test_acc);
    Ok(())
}

fn cmd_train(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let (tr, te) = cfg.data.load()?;
    let spec = cfg.arch()?;
    let mut vit = Vit::init(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.run.seed))?;
    let t = teacher(run)?;
    let loss = cfg.loss.config(cfg.train.loss_mode);
    let sup = Supervision {
        loss: &loss,
        teacher: &t,
        full: None,
    };
    let (opt, stats) = fit(
        run,
        "train",
        &mut vit,
        None,
        &tr,
        &cfg.train.optim,
        &sup,
        None,
    )?;
    let acc = evaluate(&vit, None, &te, cfg.run.eval_batch)?;
    let steps = stats.len() * tr.len().div_ceil(cfg.train.optim.batch_size);
    let mut ck = Checkpoint::new(vit);
    ck.optimizer = Some(opt);
    ck.counters = Counters {
        epoch: stats.len() as u64,
        step: steps as u64,
    };
    save(run, ck, "model.ckpt", acc, &stats)
}

fn cmd_prune(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let (tr, te) = cfg.data.load()?;
    let input = load_input(run)?;
    let spec = input.model.spec().clone();
    let full = match full_teacher(run)? {
        Some(f) => f,
        None => input.model.clone(),
    };
    let t = teacher(run)?;
    let loss = cfg.loss.config(cfg.loss.mode);
    let lut = lut_for(run, &spec)?;
    if let Some(frac) = cfg.prune.compare_schemes_at {
        let cmp = compare_schemes(&input.model, &lut, &cfg.prune.schedule, frac)?;
        write_json(&run.path("schemes.json"), &cmp)?;
        info!(
            "scheme comparison: aligned no slower = {}",
            cmp.aligned_no_slower()
        );
    }
    let inputs = PruneInputs {
        data: &tr,
        optim: &cfg.prune.optim,
        sup: Supervision {
            loss: &loss,
            teacher: &t,
            full: Some(&full),
        },
        lut: &lut,
    };
    let events_path = run.path("events.jsonl");
    if events_path.exists() {
        std::fs::remove_file(&events_path)?;
    }
    let mut log = JsonLines::append(&events_path)?;
    let mut sink = |e: &PruneEvent| {
        if let PruneEvent::Removal {
            index,
            group,
            speedup,
            ..
        } = e
        {
            info!("removal {index}: {group} speedup {speedup:.3}");
        }
        log.write(e)
    };
    let masks = input_masks(&input).cloned();
    let out = pruner::run(
        input.model.clone(),
        masks,
        &cfg.prune.schedule,
        cfg.prune.criterion,
        &inputs,
        cfg.run.seed,
        &mut sink,
    )?;
    if out.status.is_warning() {
        warn!("pruning stopped early: {:?}", out.status);
    }
    info!(
        "{} removals over {} steps, speedup {:.3}",
        out.removals,
        out.steps,
        out.speedup()
    );
    let acc = evaluate(&out.model, None, &te, cfg.run.eval_batch)?;
    write_arch(out.model.spec(), &run.path("arch.toml"))?;
    write_json(
        &run.path("prune.json"),
        &json!({
            "status": out.status,
            "steps": out.steps,
            "removals": out.removals,
            "latency_full": out.latency_full,
            "latency_final": out.latency_final,
            "speedup": out.speedup(),
            "params_before": count_params(&spec),
            "params_after": count_params(out.model.spec()),
            "test_acc": acc,
        }),
    )?;
    let mut ck = Checkpoint::new(out.model);
    ck.counters = Counters {
        epoch: 0,
        step: out.steps as u64,
    };
    ck.metrics
        .insert("speedup".into(), out.latency_full / out.latency_final);
    save(run, ck, "pruned.ckpt", acc, &[])
}

fn cmd_finetune(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let (tr, te) = cfg.data.load()?;
    let input = load_input(run)?;
    let full = full_teacher(run)?;
    let t = teacher(run)?;
    let loss = cfg.loss.config(cfg.loss.mode);
    let sup = Supervision {
        loss: &loss,
        teacher: &t,
        full: full.as_ref(),
    };
    let mut vit = input.model.clone();
    let masks = input_masks(&input);
    let (opt, stats) = fit(
        run,
        "finetune",
        &mut vit,
        masks,
        &tr,
        &cfg.finetune.optim,
        &sup,
        input.sparsity.as_ref(),
    )?;
    let acc = evaluate(&vit, masks, &te, cfg.run.eval_batch)?;
    let mut ck = Checkpoint::new(vit);
    ck.masks = input.masks.clone();
    ck.sparsity = input.sparsity.clone();
    ck.optimizer = Some(opt);
    ck.counters = Counters {
        epoch: input.counters.epoch + stats.len() as u64,
        step: input.counters.step
            + (stats.len() * tr.len().div_ceil(cfg.finetune.optim.batch_size)) as u64,
    };
    save(run, ck, "finetuned.ckpt", acc, &stats)
}

fn cmd_generate(run: &Run) -> Result<()> {
    let spec = generate(&run.cfg.nvit.rule())?;
    write_arch(&spec, &run.path("arch.toml"))?;
    let summary = json!({
        "params": count_params(&spec),
        "flops": count_flops(&spec),
        "blocks": spec.blocks,
    });
    write_json(&run.path("generate.json"), &summary)?;
    info!(
        "generated {} blocks, {} params, {} MACs",
        spec.blocks.len(),
        count_params(&spec),
        count_flops(&spec)
    );
    Ok(())
}

fn cmd_profile(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let tokens = cfg.arch()?.num_tokens();
    let grid = cfg.lut.grid.grid();
    let bs = cfg.lut.batch_size;
    let mut runner: Box<dyn BlockRunner> = match cfg.lut.runner {
        RunnerKind::Analytic => Box::new(AnalyticRunner {
            batch_size: bs,
            tokens,
        }),
        RunnerKind::WallClock => Box::new(WallClockRunner::new(bs, tokens, cfg.run.seed)?),
    };
    let repeats = match cfg.lut.runner {
        RunnerKind::Analytic => 1,
        RunnerKind::WallClock => cfg.lut.repeats,
    };
    info!("profiling {} grid points", grid.measured_points());
    let lut = profile(&grid, runner.as_mut(), repeats, bs, tokens)?;
    let path = run.path("lut.txt");
    lut.save(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_sparsify(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let (tr, te) = cfg.data.load()?;
    let input = load_input(run)?;
    let masks = input_masks(&input);
    let before = evaluate(&input.model, masks, &te, cfg.run.eval_batch)?;
    let mut vit = input.model.clone();
    let keep = sparsify_model(&mut vit)?;
    let pruned_acc = evaluate(&vit, masks, &te, cfg.run.eval_batch)?;
    let mut stats = Vec::new();
    if cfg.sparsify.finetune_epochs > 0 {
        let full = match full_teacher(run)? {
            Some(f) => f,
            None => input.model.clone(),
        };
        let t = teacher(run)?;
        let loss = cfg.loss.config(cfg.loss.mode);
        let sup = Supervision {
            loss: &loss,
            teacher: &t,
            full: Some(&full),
        };
        let optim = OptimConfig {
            epochs: cfg.sparsify.finetune_epochs,
            ..cfg.finetune.optim
        };
        stats = fit(
            run,
            "sparsify",
            &mut vit,
            masks,
            &tr,
            &optim,
            &sup,
            Some(&keep),
        )?
        .1;
    }
    let after = evaluate(&vit, masks, &te, cfg.run.eval_batch)?;
    let reports = verify_model(&vit);
    let all_ok = reports.iter().all(|(_, r)| r.ok());
    write_json(
        &run.path("sparsity.json"),
        &json!({
            "pattern_ok": all_ok,
            "test_acc_dense": before,
            "test_acc_sparse": pruned_acc,
            "test_acc_final": after,
            "tensors": reports.iter().map(|(n, r)| json!({ "name": n, "report": r })).collect::<Vec<_>>(),
        }),
    )?;
    if !all_ok {
        return Err(Error::Checkpoint(
            "2:4 pattern violated after sparsification".into(),
        ));
    }
    let mut ck = Checkpoint::new(vit);
    ck.masks = input.masks.clone();
    ck.sparsity = Some(keep);
    ck.counters = input.counters;
    save(run, ck, "sparse.ckpt", after, &stats)
}

fn cmd_analyze(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    if let Some(events) = &cfg.analyze.events {
        let history: Vec<PruneEvent> = read_json_lines(events)?;
        let rep = report(&history)?;
        for p in write_report(&rep, run.out())? {
            info!("wrote {}", p.display());
        }
        let rp = replay(&history)?;
        write_json(&run.path("replay.json"), &rp)?;
        if !rp.ok() {
            warn!("replay found {} mismatching decisions", rp.mismatches.len());
        }
        let generated = generate(&cfg.nvit.rule())?;
        write_json(
            &run.path("trend.json"),
            &compare_trend(&generated, &history)?,
        )?;
    }
    if cfg.run.input.is_some() {
        let input = load_input(run)?;
        let (_, te) = cfg.data.load()?;
        let n = cfg.analyze.diversity_images.min(te.len());
        if n == 0 {
            return Err(Error::config(
                "analyze.diversity_images",
                "no test images available",
            ));
        }
        let (x, _) = te.batch(&(0..n).collect::<Vec<_>>(), None)?;
        let map = attention_diversity(&input.model, &x, input_masks(&input))?;
        write_diversity(&map, &run.path("diversity.tsv"))?;
        write_json(
            &run.path("diversity.json"),
            &json!({ "block_means": map.block_means() }),
        )?;
    }
    Ok(())
}

fn cmd_eval(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let (tr, te) = cfg.data.load()?;
    let input = load_input(run)?;
    let masks = input_masks(&input);
    let test = evaluate(&input.model, masks, &te, cfg.run.eval_batch)?;
    let train_acc = evaluate(&input.model, masks, &tr, cfg.run.eval_batch)?;
    let spec = input.model.spec();
    write_json(
        &run.path("eval.json"),
        &json!({
            "top1_test": test,
            "top1_train": train_acc,
            "test_images": te.len(),
            "params": count_params(spec),
            "flops": count_flops(spec),
            "augmentation": AUGMENTATION,
        }),
    )?;
    info!("top-1 test {test:.4} train {train_acc:.4}");
    Ok(())
}
