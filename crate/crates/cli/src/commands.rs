use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use roam_core::bagio::{
    gen_synthetic_dataset, read_bag, DatasetManifest, PatchBag, Split, SplitPlan,
};
use roam_core::nnmodel::{init_params, roam_trace, Mode, ModelParams, RoamConfig};
use roam_core::traingrad::{
    evaluate, gradcheck, tiny_instance, train, GradCheckOptions, GradCheckReport,
};

use crate::config::{usage, RunConfig, RESOLVED_NAME};
use crate::{bench, Cli, Command};

/// Builds the run config: defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    // a checkpoint is only meaningful with the model it was trained as, so
    // without an explicit config take [model] from the file saved beside it
    if cli.config.is_none() {
        let ckpt = match &cli.command {
            Command::Eval(a) => a.checkpoint.as_ref(),
            Command::Route(a) => a.checkpoint.as_ref(),
            _ => None,
        };
        if let Some(sibling) = ckpt.and_then(|c| c.parent()).map(|d| d.join(RESOLVED_NAME)) {
            if sibling.is_file() {
                cfg.model = RunConfig::load(&sibling)?.model;
            }
        }
    }
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    match &cli.command {
        Command::GenSynth(a) => {
            if let Some(n) = a.slides_per_class {
                cfg.synth.n_slides_per_class = n;
            }
        }
        Command::Train(a) => {
            if let Some(m) = &a.manifest {
                cfg.paths.manifest = Some(m.clone());
            }
            if let Some(n) = a.max_epochs {
                cfg.train.max_epochs = n;
            }
        }
        Command::Eval(a) => {
            if let Some(m) = &a.manifest {
                cfg.paths.manifest = Some(m.clone());
            }
            if let Some(c) = &a.checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(s) = &a.split {
                cfg.paths.split = Some(s.clone());
            }
        }
        Command::Route(a) => {
            if let Some(c) = &a.checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(b) = &a.bag {
                cfg.paths.bag = Some(b.clone());
            }
        }
        Command::Bench(_) | Command::CheckGrad(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli)?;
    if cli.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = cfg.out_dir();
    match &cli.command {
        Command::GenSynth(_) => gen_synth(&cfg, &out),
        Command::Train(_) => run_train(&cfg, &out),
        Command::Eval(_) => run_eval(&cfg, &out),
        Command::Route(_) => run_route(&cfg, &out),
        Command::Bench(a) => {
            cfg.write_resolved(&out)?;
            bench::run(a, cfg.train.seed, &out)
        }
        Command::CheckGrad(a) => check_grad(&cfg, &a.variants, &out),
    }
}

fn existing(path: Option<&PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    let path = path.ok_or_else(|| {
        usage(format!(
            "no {what} given (set it in [paths] or pass it as a flag)"
        ))
    })?;
    if !path.exists() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(path.clone())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> anyhow::Result<DatasetManifest> {
    let path = existing(cfg.paths.manifest.as_ref(), "manifest")?;
    DatasetManifest::load(&path).with_context(|| format!("loading manifest {}", path.display()))
}

fn gen_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let manifest = gen_synthetic_dataset(&cfg.synth, out, SplitPlan::default())?;
    let mut resolved = cfg.clone();
    resolved.paths.manifest = Some(out.join("manifest.csv"));
    resolved.write_resolved(out)?;
    let count = |s| manifest.split(s).count();
    info!(
        "wrote {} slides to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let manifest = load_manifest(cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = train(&manifest, &cfg.model, &cfg.train)?;

    let ckpt = out.join("checkpoint.bin");
    std::fs::write(&ckpt, outcome.checkpoint_bytes())
        .with_context(|| format!("writing {}", ckpt.display()))?;
    let mut hist = create(&out.join("history.jsonl"))?;
    outcome.write_history_jsonl(&mut hist)?;
    hist.flush()?;

    let mut resolved = cfg.clone();
    resolved.model = outcome.config.clone();
    resolved.paths.checkpoint = Some(ckpt);
    resolved.write_resolved(out)?;

    let val = evaluate(
        &manifest.load_split::<f64>(Split::Val)?,
        &outcome.best,
        &outcome.config,
        "val",
    )?;
    let test_bags = manifest.load_split::<f64>(Split::Test)?;
    let test = if test_bags.is_empty() {
        None
    } else {
        Some(evaluate(
            &test_bags,
            &outcome.best,
            &outcome.config,
            "test",
        )?)
    };
    let report = serde_json::json!({
        "routing_mode": outcome.config.routing_mode(),
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "val": val,
        "test": test,
    });
    write_json(&out.join("report.json"), &report)?;
    info!(
        "best epoch {} of {}; val loss {:.4}; artifacts in {}",
        outcome.best_epoch,
        outcome.history.len(),
        val.loss,
        out.display()
    );
    Ok(())
}

/// Model config with `d_in` taken from the data when unset, and the
/// checkpoint decoded against it.
fn load_model(cfg: &RunConfig, d_in: usize) -> anyhow::Result<(RoamConfig, ModelParams<f64>)> {
    let path = existing(cfg.paths.checkpoint.as_ref(), "checkpoint")?;
    let mut model = cfg.model.clone();
    model.d_in.get_or_insert(d_in);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let params = ModelParams::decode_checkpoint(&bytes, &model).map_err(|e| {
        usage(format!(
            "checkpoint {} does not match the model config: {e}",
            path.display()
        ))
    })?;
    Ok((model, params))
}

fn run_eval(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let split_name = cfg.paths.split.as_deref().unwrap_or("test");
    let split: Split = split_name
        .parse()
        .map_err(|e: roam_core::Error| usage(e.to_string()))?;
    let manifest = load_manifest(cfg)?;
    let bags = manifest.load_split::<f64>(split)?;
    let Some(first) = bags.first() else {
        bail!("split {split} of the manifest is empty");
    };
    let (model, params) = load_model(cfg, first.d_in())?;
    let report = evaluate(&bags, &params, &model, split_name)?;

    let mut resolved = cfg.clone();
    resolved.model = model;
    resolved.write_resolved(out)?;
    write_json(&out.join(format!("metrics_{split}.json")), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_route(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let bag_path = existing(cfg.paths.bag.as_ref(), "bag")?;
    let bag: PatchBag<f64> = read_bag(&bag_path)?;
    let (model, params) = load_model(cfg, bag.d_in())?;
    let trace = roam_trace(&bag, &params, &model, Mode::Eval)?;

    let mut resolved = cfg.clone();
    resolved.model = model;
    resolved.write_resolved(out)?;

    let layout = &trace.layout;
    let gamma = &trace.dispatch.gamma;
    let dominant = &trace.diagnostics.dominant;
    let mut w = create(&out.join("routing.csv"))?;
    write!(w, "region_id,x,y,mass,dominant_expert")?;
    for e in 0..gamma.ncols() {
        write!(w, ",gamma_{e}")?;
    }
    writeln!(w)?;
    for (m, &dom) in dominant.iter().enumerate() {
        let c = layout.centroids.row(m);
        write!(w, "{m},{},{},{},{}", c[0], c[1], layout.masses[m], dom)?;
        for v in gamma.row(m) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    write_json(&out.join("route_diagnostics.json"), &trace.diagnostics)?;
    info!(
        "routed {} regions of {} into {}",
        layout.n_regions(),
        bag.slide_id,
        out.display()
    );
    Ok(())
}

const VARIANTS: [&str; 6] = [
    "default",
    "no_routing_gnn",
    "no_graph_reg",
    "no_ot_modulation",
    "softmax_routing",
    "detach_routing",
];

fn apply_variant(cfg: &mut RoamConfig, name: &str) -> anyhow::Result<()> {
    match name {
        "default" => {}
        "no_routing_gnn" => cfg.no_routing_gnn = true,
        "no_graph_reg" => cfg.no_graph_reg = true,
        "no_ot_modulation" => cfg.no_ot_modulation = true,
        "softmax_routing" => cfg.softmax_routing = true,
        "detach_routing" => cfg.detach_routing = true,
        other => {
            return Err(usage(format!(
                "unknown gradient-check variant {other:?}; expected one of {VARIANTS:?}"
            )))
        }
    }
    Ok(())
}

fn check_grad(cfg: &RunConfig, variants: &[String], out: &Path) -> anyhow::Result<()> {
    let names: Vec<&str> = if variants.is_empty() {
        VARIANTS.to_vec()
    } else {
        variants.iter().map(String::as_str).collect()
    };
    for name in &names {
        apply_variant(&mut RoamConfig::default(), name)?;
    }
    cfg.write_resolved(out)?;
    let seed = cfg.train.seed;
    let (bag, base) = tiny_instance(seed)?;
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    for name in names {
        let mut tiny = base.clone();
        apply_variant(&mut tiny, name)?;
        let params = init_params::<f64>(&tiny, seed)?;
        let report = gradcheck(
            &bag,
            &params,
            &tiny,
            1,
            Mode::Train { seed },
            GradCheckOptions::default(),
        )?;
        println!(
            "{} {name}: max rel err {:.2e} over {} coordinates",
            if report.passed { "ok  " } else { "FAIL" },
            report.max_rel_err,
            report.checked
        );
        for t in &report.tensors {
            println!(
                "    {:<16} {:>5} checked {:>3} skipped  {:.2e}",
                t.name, t.checked, t.skipped, t.max_rel_err
            );
        }
        reports.push((name.to_string(), report));
    }
    let doc: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?)))
        .collect::<anyhow::Result<_>>()?;
    write_json(&out.join("gradcheck.json"), &doc)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, _)| n.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
