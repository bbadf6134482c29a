use std::path::{Path, PathBuf};
use std::process::Command as Process;

use serde::{Deserialize, Serialize};

use lyapctl_core::cegis::CegisReport;
use lyapctl_core::dataset::{
    load_bundle, load_split_ids, read_json, save_bundle, save_split_ids, synth_graph, write_json,
    GraphBundle, Splits, SynthSpec,
};
use lyapctl_core::experiment::{
    evaluate_seed, prepare_features, run_cegis, select_node, splits_for_seed, train_baseline,
};
use lyapctl_core::neuralnet::{one_hot, ClosedLoop, Mlp};
use lyapctl_core::reconstruct::{accuracy, export_embeddings, EvalReport};
use lyapctl_core::sgc::{NodeAffineSystem, SgcCheckpoint, SgcModel, SgcTrainReport};
use lyapctl_core::verifier::{branch_and_bound, StateBox, VerifierReport};
use lyapctl_core::Error;

use crate::config::RunConfig;
use crate::{Cli, CliError, Command};

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: RunConfig,
    run_dir: PathBuf,
}

/// `sgc_metrics.json`.
#[derive(Debug, Serialize, Deserialize)]
struct SgcMetrics {
    seed: u64,
    train_accuracy: f64,
    val_accuracy: Option<f64>,
    test_accuracy: f64,
    report: SgcTrainReport,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let stored = cli.run_dir.join("config.txt");
    match &cli.config {
        Some(p) => cfg.apply_file(p)?,
        None if stored.is_file() => cfg.apply_file(&stored)?,
        None => {}
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Command::Synth(a) = &cli.command {
        let g = synth_graph(&SynthSpec {
            blocks: a.blocks,
            nodes_per_block: a.nodes_per_block,
            p_in: a.p_in,
            p_out: a.p_out,
            feature_dim: a.feature_dim,
            seed: a.seed,
        })?;
        save_bundle(&g, &a.out)?;
        log::info!("wrote {} nodes to {}", g.num_nodes(), a.out.display());
        return Ok(());
    }
    let ctx = Ctx {
        cli,
        cfg: load_config(cli)?,
        run_dir: cli.run_dir.clone(),
    };
    match &cli.command {
        Command::Synth(_) => unreachable!("handled above"),
        Command::Prepare => prepare(&ctx),
        Command::TrainGnn => per_seed(&ctx, "train-gnn", train_gnn),
        Command::Cegis => per_seed(&ctx, "cegis", cegis),
        Command::Eval => eval(&ctx),
        Command::Verify(a) => verify(&ctx, a),
        Command::ExportEmbeddings(a) => {
            let seed = a.seed.unwrap_or(ctx.cfg.seeds[0]);
            let (g, _) = seed_graph(&ctx, seed)?;
            let model = load_sgc(&ctx, seed, &g)?;
            let out = a
                .out
                .clone()
                .unwrap_or_else(|| ctx.seed_dir(seed).join("embeddings.csv"));
            export_embeddings(&g, &model, &out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Run => {
            prepare(&ctx)?;
            per_seed(&ctx, "train-gnn", train_gnn)?;
            let cegis_result = per_seed(&ctx, "cegis", cegis);
            match cegis_result {
                Ok(()) | Err(CliError::NotCertified(_)) => {}
                Err(e) => return Err(e),
            }
            eval(&ctx)?;
            cegis_result
        }
    }
}

impl Ctx<'_> {
    fn prepared(&self) -> PathBuf {
        self.run_dir.join("prepared")
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir.join(format!("seed-{seed}"))
    }
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p).map_err(|e| {
        CliError::Core(Error::Io {
            path: p.into(),
            source: e,
        })
    })
}

fn prepare(ctx: &Ctx) -> Result<(), CliError> {
    let dataset = ctx.cfg.dataset.as_ref().ok_or_else(|| {
        CliError::Usage("no dataset configured (set dataset = <bundle dir>)".into())
    })?;
    let raw = load_bundle(dataset)?;
    let (mut reduced, pca) = prepare_features(&raw, ctx.cfg.exp.pca_dim)?;
    reduced.splits = raw.splits.clone();
    create_dir(&ctx.prepared())?;
    std::fs::write(ctx.run_dir.join("config.txt"), ctx.cfg.to_text()).map_err(|e| {
        CliError::Core(Error::Io {
            path: ctx.run_dir.join("config.txt"),
            source: e,
        })
    })?;
    write_json(&ctx.prepared().join("pca.json"), &pca)?;
    for &seed in &ctx.cfg.seeds {
        let splits = splits_for_seed(&reduced, &ctx.cfg.exp, seed)?;
        create_dir(&ctx.seed_dir(seed))?;
        save_split_ids(ctx.seed_dir(seed).join("splits.json"), &splits)?;
        let (tr, va, te) = splits.counts();
        log::info!("seed {seed}: {tr} train / {va} val / {te} test");
    }
    let mut stored = reduced;
    stored.splits = None;
    save_bundle(&stored, ctx.prepared().join("bundle"))?;
    log::info!(
        "prepared {} nodes, {} -> {} features, {} classes",
        raw.num_nodes(),
        raw.feature_dim(),
        stored.feature_dim(),
        stored.num_classes
    );
    Ok(())
}

/// Prepared bundle with this seed's splits attached.
fn seed_graph(ctx: &Ctx, seed: u64) -> Result<(GraphBundle, PathBuf), CliError> {
    let mut g = load_bundle(ctx.prepared().join("bundle"))?;
    let dir = ctx.seed_dir(seed);
    let ids = load_split_ids(dir.join("splits.json"))?;
    g.splits = Some(Splits::from_ids(g.num_nodes(), &ids)?);
    Ok((g, dir))
}

fn load_sgc(ctx: &Ctx, seed: u64, g: &GraphBundle) -> Result<SgcModel, CliError> {
    let ck: SgcCheckpoint = read_json(&ctx.seed_dir(seed).join("sgc.json"))?;
    Ok(SgcModel::from_checkpoint(ck, g)?)
}

fn train_gnn(ctx: &Ctx, seed: u64) -> Result<(), CliError> {
    let (g, dir) = seed_graph(ctx, seed)?;
    let (model, report) = train_baseline(&g, &ctx.cfg.exp, seed)?;
    let pred = model.predict(None)?;
    let splits = g.splits()?;
    let val_accuracy = if splits.val.iter().any(|&b| b) {
        Some(accuracy(&pred, &g.labels, &splits.val)?)
    } else {
        None
    };
    let metrics = SgcMetrics {
        seed,
        train_accuracy: accuracy(&pred, &g.labels, &splits.train)?,
        val_accuracy,
        test_accuracy: accuracy(&pred, &g.labels, &splits.test)?,
        report,
    };
    write_json(&dir.join("sgc.json"), &model.checkpoint())?;
    write_json(&dir.join("sgc_metrics.json"), &metrics)?;
    log::info!(
        "seed {seed}: SGC test accuracy {:.4} after {} epochs",
        metrics.test_accuracy,
        metrics.report.epochs_run
    );
    Ok(())
}

fn cegis(ctx: &Ctx, seed: u64) -> Result<(), CliError> {
    let (g, dir) = seed_graph(ctx, seed)?;
    let model = load_sgc(ctx, seed, &g)?;
    let node = select_node(&g, &ctx.cfg.exp, seed)?;
    let (cl, report) = run_cegis(&g, &model, node, &ctx.cfg.exp, seed)?;
    write_json(&dir.join("controller.json"), &cl.controller)?;
    write_json(&dir.join("lyapunov.json"), &cl.lyapunov)?;
    write_json(&dir.join("plant.json"), &cl.plant)?;
    write_json(&dir.join("cegis_report.json"), &report)?;
    if let Some(v) = &report.verifier {
        write_json(&dir.join("verifier_report.json"), v)?;
    }
    log::info!(
        "seed {seed}: node {node}, certified {} after {} rounds",
        report.certified,
        report.rounds.len()
    );
    if report.certified {
        Ok(())
    } else {
        Err(CliError::NotCertified(1))
    }
}

fn load_loop(ctx: &Ctx, seed: u64, num_classes: usize) -> Result<ClosedLoop, CliError> {
    let dir = ctx.seed_dir(seed);
    load_loop_from(
        &dir.join("controller.json"),
        &dir.join("lyapunov.json"),
        &dir.join("plant.json"),
        ctx.cfg.exp.class_id,
        Some(num_classes),
    )
}

fn load_loop_from(
    controller: &Path,
    lyapunov: &Path,
    plant: &Path,
    class_id: usize,
    num_classes: Option<usize>,
) -> Result<ClosedLoop, CliError> {
    let controller: Mlp = read_json(controller)?;
    let lyapunov: Mlp = read_json(lyapunov)?;
    let plant: NodeAffineSystem = read_json(plant)?;
    let c = plant.num_classes();
    if let Some(n) = num_classes {
        if n != c {
            return Err(Error::Validation(format!("plant has {c} classes, graph has {n}")).into());
        }
    }
    Ok(ClosedLoop::new(
        controller,
        plant,
        lyapunov,
        one_hot(class_id, c)?,
    )?)
}

fn eval(ctx: &Ctx) -> Result<(), CliError> {
    let mut results = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let (g, dir) = seed_graph(ctx, seed)?;
        let model = load_sgc(ctx, seed, &g)?;
        let cl = load_loop(ctx, seed, g.num_classes)?;
        let report: CegisReport = read_json(&dir.join("cegis_report.json"))?;
        if !report.certified {
            log::warn!("seed {seed}: networks are not certified, evaluating best effort");
        }
        results.push(evaluate_seed(
            &g,
            &model,
            &cl,
            report.certified,
            ctx.cfg.exp.cegis.eps,
            seed,
        )?);
    }
    let report = EvalReport::aggregate(ctx.cfg.exp.class_id, results);
    write_json(&ctx.run_dir.join("results.json"), &report)?;
    print!("{}", report.table());
    Ok(())
}

fn verify(ctx: &Ctx, a: &crate::VerifyArgs) -> Result<(), CliError> {
    let cl = match (&a.controller, &a.lyapunov, &a.plant) {
        (Some(c), Some(l), Some(p)) => load_loop_from(c, l, p, ctx.cfg.exp.class_id, None)?,
        _ => {
            let seed = a.seed.unwrap_or(ctx.cfg.seeds[0]);
            let dir = ctx.seed_dir(seed);
            load_loop_from(
                &dir.join("controller.json"),
                &dir.join("lyapunov.json"),
                &dir.join("plant.json"),
                ctx.cfg.exp.class_id,
                None,
            )?
        }
    };
    let vcfg = ctx.cfg.exp.cegis.verifier();
    let result = branch_and_bound(&cl, &StateBox::unit(cl.num_classes()), &vcfg);
    let report = VerifierReport::from_result(result, &vcfg)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if report.verdict == "certified" {
        Ok(())
    } else {
        Err(CliError::NotCertified(1))
    }
}

/// Runs `stage` for every configured seed, in worker processes when
/// `--parallel-seeds` allows. All seeds run even if some fail; the most
/// severe failure is returned.
fn per_seed(
    ctx: &Ctx,
    name: &str,
    stage: fn(&Ctx, u64) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let seeds = &ctx.cfg.seeds;
    if ctx.cli.parallel_seeds <= 1 || seeds.len() <= 1 {
        let mut outcome = Ok(());
        let mut not_certified = 0;
        for &seed in seeds {
            match stage(ctx, seed) {
                Ok(()) => {}
                Err(CliError::NotCertified(n)) => not_certified += n,
                Err(e) => return Err(e),
            }
        }
        if not_certified > 0 {
            outcome = Err(CliError::NotCertified(not_certified));
        }
        return outcome;
    }
    let exe = std::env::current_exe()
        .map_err(|e| CliError::Usage(format!("cannot locate executable: {e}")))?;
    let mut codes = Vec::new();
    for chunk in seeds.chunks(ctx.cli.parallel_seeds) {
        let mut children = Vec::new();
        for &seed in chunk {
            let mut cmd = Process::new(&exe);
            cmd.arg("--run-dir").arg(&ctx.run_dir);
            if let Some(c) = &ctx.cli.config {
                cmd.arg("--config").arg(c);
            }
            for kv in &ctx.cli.overrides {
                cmd.arg("--set").arg(kv);
            }
            cmd.arg("--set").arg(format!("seeds={seed}")).arg(name);
            let child = cmd
                .spawn()
                .map_err(|e| CliError::Usage(format!("cannot spawn worker: {e}")))?;
            children.push(child);
        }
        for mut child in children {
            let status = child
                .wait()
                .map_err(|e| CliError::Usage(format!("worker wait failed: {e}")))?;
            codes.push(status.code().unwrap_or(1) as u8);
        }
    }
    let not_certified = codes.iter().filter(|&&c| c == 3).count();
    let worst = codes.iter().copied().filter(|&c| c != 0 && c != 3).max();
    match worst {
        Some(c) => Err(CliError::Worker(c)),
        None if not_certified > 0 => Err(CliError::NotCertified(not_certified)),
        None => Ok(()),
    }
}
