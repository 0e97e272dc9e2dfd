//! Single command-line entry point wiring data generation, pretraining,
//! and the downstream evaluations into reproducible runs.
//!
//! Every command is a pure function of (config, input artifacts, seed):
//! rerunning with identical inputs overwrites outputs byte-identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ordalign_core::config::ExperimentConfig;
use ordalign_core::diffgen::{
    generate, psnr, train_decoder, train_prior, DecoderNet, DiffusionSchedule, PriorNet,
};
use ordalign_core::downstream::{
    band_means, metrics_csv, project_2d, property_deviation, retrieve_all, similarity_matrix,
    topk_accuracy, train_predictor, PredictorMode,
};
use ordalign_core::encoders::{build_aux_corpus, pretrain_base_vision, save_base_checkpoint};
use ordalign_core::rvegen::{self, Microstructure, SamplePair};
use ordalign_core::trainer::{pretrain, split_dataset, OrderModel, SplitSpec, TrainMode};
use ordalign_core::{Error, Result};

/// Environment variable providing the default output root for relative
/// `out_dir` values.
const OUT_ROOT_ENV: &str = "ORDALIGN_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "ordalign",
    version,
    about = "Ordinal-aware image-tabular pretraining lab for synthetic composites",
    after_help = "Outputs land under the run directory (config `out_dir`, \
overridable with --out; relative paths resolve against $ORDALIGN_OUT_ROOT \
when set). Each command writes a files.txt manifest of what it produced."
)]
struct Cli {
    /// Experiment config (TOML)
    #[arg(long, global = true, default_value = "ordalign.toml")]
    config: PathBuf,
    /// Override the global seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired (descriptor, image, properties) dataset
    GenData,
    /// Pretrain both encoders in the configured mode
    Pretrain,
    /// Cross-modal retrieval metrics on the test split
    Retrieve {
        /// Candidate counts to evaluate (repeatable); defaults to config
        #[arg(long = "k")]
        k: Vec<usize>,
        /// Model checkpoint; defaults to the pretrain output
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train MLP property predictors on frozen features
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate microstructures conditioned on descriptors
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset sample ids to re-generate (repeatable)
        #[arg(long = "id")]
        ids: Vec<u64>,
        /// Free-form descriptors "vf,mma" (repeatable)
        #[arg(long = "descriptor")]
        descriptors: Vec<String>,
        /// Images per requested descriptor
        #[arg(long, default_value_t = 1)]
        per_descriptor: usize,
        /// Sampling seed (defaults to the config seed)
        #[arg(long)]
        gen_seed: Option<u64>,
    },
    /// Feature-space diagnostics: similarity matrices and 2-D projection
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = ExperimentConfig::from_path(&cli.config)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.out_dir = out.display().to_string();
        }
        let mut out = PathBuf::from(&cfg.out_dir);
        if out.is_relative() {
            if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
                out = PathBuf::from(root).join(out);
            }
        }
        fs::create_dir_all(&out)?;
        fs::write(out.join("config_resolved.toml"), cfg.to_toml())?;
        Ok(Self { cfg, out })
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn split_path(&self) -> PathBuf {
        self.out.join("split.csv")
    }

    fn base_path(&self) -> PathBuf {
        self.out.join("base.bin")
    }

    fn pretrain_dir(&self) -> PathBuf {
        self.out.join("pretrain")
    }

    fn default_checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("checkpoint_final.bin")
    }

    fn load_dataset(&self) -> Result<Vec<SamplePair>> {
        rvegen::load_dataset(&self.data_dir())
    }

    fn load_split(&self) -> Result<SplitSpec> {
        SplitSpec::load(&self.split_path(), self.cfg.trainer.split_seed)
    }

    fn load_model(&self, checkpoint: &Option<PathBuf>) -> Result<(OrderModel, PathBuf)> {
        let path = checkpoint.clone().unwrap_or_else(|| self.default_checkpoint());
        if !path.exists() {
            return Err(Error::FrozenCheckpointMissing(path.display().to_string()));
        }
        Ok((OrderModel::load(&path)?, path))
    }

    fn write_manifest(&self, dir: &Path, files: &[String]) -> Result<()> {
        let mut text = String::new();
        for f in files {
            let _ = writeln!(text, "{f}");
        }
        fs::write(dir.join("files.txt"), text)?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&ctx),
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Retrieve { k, checkpoint } => cmd_retrieve(&ctx, k, checkpoint),
        Command::Predict { checkpoint } => cmd_predict(&ctx, checkpoint),
        Command::Generate {
            checkpoint,
            ids,
            descriptors,
            per_descriptor,
            gen_seed,
        } => cmd_generate(&ctx, checkpoint, ids, descriptors, *per_descriptor, *gen_seed),
        Command::Eval { checkpoint } => cmd_eval(&ctx, checkpoint),
    }
}

fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.data_dir();
    let samples = rvegen::generate_dataset(&ctx.cfg.gen_config()?, &dir)?;
    let mut files = vec!["manifest.csv".to_string()];
    files.extend(samples.iter().map(|s| format!("images/{:05}.pgm", s.id)));
    ctx.write_manifest(&dir, &files)?;
    println!(
        "generated {} samples under {}",
        samples.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let ids: Vec<u64> = dataset.iter().map(|s| s.id).collect();
    let split = split_dataset(&ids, ctx.cfg.trainer.split_seed)?;
    split.save(&ctx.split_path())?;

    let enc_cfg = ctx.cfg.encoder_config();
    let base = if enc_cfg.freeze_base {
        let path = ctx.base_path();
        if !path.exists() {
            log::info!("pretraining vision base (rotation prediction)");
            let aux = build_aux_corpus(
                ctx.cfg.encoders.aux_count,
                ctx.cfg.seed,
                ctx.cfg.rvegen.image_size,
                ctx.cfg.encoders.ramp,
            )?;
            let outcome = pretrain_base_vision(&aux, &enc_cfg, &ctx.cfg.base_pretrain_config())?;
            println!(
                "vision base rotation accuracy (held out): {:.3}",
                outcome.holdout_accuracy
            );
            save_base_checkpoint(&path, &outcome)?;
        }
        Some(path)
    } else {
        None
    };

    let train_cfg = ctx.cfg.train_config()?;
    let model = OrderModel::init(
        &dataset,
        &split,
        &enc_cfg,
        ctx.cfg.seed,
        base.as_deref(),
    )?;
    let outcome = pretrain(model, &dataset, &split, &train_cfg)?;

    let dir = ctx.pretrain_dir();
    fs::create_dir_all(&dir)?;
    let curves_csv = outcome.curves_csv();
    let iter_csv = outcome.iter_csv();
    let last = *outcome.curves.last().expect("at least one epoch");
    let best_epoch = outcome.best_epoch;
    outcome.model.save(&dir.join("checkpoint_final.bin"))?;
    let mut best_model = outcome.model;
    best_model.store = outcome.best;
    best_model.save(&dir.join("checkpoint_best.bin"))?;
    fs::write(dir.join("loss_curves.csv"), curves_csv)?;
    let mut files = vec![
        "checkpoint_final.bin".to_string(),
        "checkpoint_best.bin".to_string(),
        "loss_curves.csv".to_string(),
    ];
    if matches!(train_cfg.mode, TrainMode::OrderDyn) {
        fs::write(dir.join("training_log.csv"), iter_csv)?;
        files.push("training_log.csv".to_string());
    }
    ctx.write_manifest(&dir, &files)?;
    println!(
        "pretrained ({} mode, {} epochs): l_align {:.4}, l_order {:.4}, best epoch {}",
        train_cfg.mode.as_str(),
        train_cfg.epochs,
        last.l_align,
        last.l_order,
        best_epoch
    );
    Ok(())
}

fn by_id(dataset: &[SamplePair]) -> BTreeMap<u64, &SamplePair> {
    dataset.iter().map(|s| (s.id, s)).collect()
}

fn cmd_retrieve(ctx: &Ctx, k_list: &[usize], checkpoint: &Option<PathBuf>) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let split = ctx.load_split()?;
    let (model, _) = ctx.load_model(checkpoint)?;
    let index = by_id(&dataset);
    let test: Vec<&SamplePair> = split
        .test
        .iter()
        .map(|id| index.get(id).copied().ok_or(Error::MissingGroundTruth(*id)))
        .collect::<Result<_>>()?;
    let (hv, ht) = model.encode_samples(&test)?;
    let ids: Vec<u64> = test.iter().map(|s| s.id).collect();
    let targets: BTreeMap<u64, Vec<f64>> = test
        .iter()
        .map(|s| (s.id, s.targets.as_array().to_vec()))
        .collect();

    let ks = if k_list.is_empty() {
        ctx.cfg.downstream.k.clone()
    } else {
        k_list.to_vec()
    };
    let mut rows = Vec::new();
    for &k in &ks {
        for (dir_name, queries, cands) in [("i2t", &hv, &ht), ("t2i", &ht, &hv)] {
            let results = retrieve_all(queries, &ids, cands, &ids, k)?;
            rows.push((
                format!("top{k}_accuracy"),
                "retrieval".to_string(),
                dir_name.to_string(),
                topk_accuracy(&results),
            ));
            let dev = property_deviation(&results, &targets)?;
            for (p, name) in dev
                .per_property
                .iter()
                .zip(["yield_strength", "elongation"])
            {
                rows.push((
                    format!("top{k}_deviation_{name}"),
                    "retrieval".to_string(),
                    dir_name.to_string(),
                    *p,
                ));
            }
            rows.push((
                format!("top{k}_deviation_aggregate"),
                "retrieval".to_string(),
                dir_name.to_string(),
                dev.aggregate,
            ));
        }
    }
    let dir = ctx.out.join("retrieve");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
    ctx.write_manifest(&dir, &["metrics.csv".to_string()])?;
    for (m, _, d, v) in &rows {
        println!("{m} [{d}] = {v:.4}");
    }
    Ok(())
}

fn cmd_predict(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let (model, _) = ctx.load_model(checkpoint)?;
    let ids: Vec<u64> = dataset.iter().map(|s| s.id).collect();
    // Fresh split for prediction tasks.
    let split = split_dataset(&ids, ctx.cfg.downstream.predict_split_seed)?;
    let samples: Vec<&SamplePair> = dataset.iter().collect();
    let (hv, ht) = model.encode_samples(&samples)?;
    let fused = concat_features(&ht.features, &hv.features);

    let pcfg = ctx.cfg.predictor_config();
    let mut rows = Vec::new();
    let mut pred_lines = String::from("id,property,modality,prediction,truth\n");
    for (prop_idx, prop) in ["yield_strength", "elongation"].iter().enumerate() {
        let targets: BTreeMap<u64, f64> = dataset
            .iter()
            .map(|s| (s.id, s.targets.as_array()[prop_idx]))
            .collect();
        for (mode, feats) in [
            (PredictorMode::Tabular, &ht.features),
            (PredictorMode::Vision, &hv.features),
            (PredictorMode::Fusion, &fused),
        ] {
            let out = train_predictor(feats, &ids, &targets, &split, mode, &pcfg)?;
            rows.push((
                "rmse".to_string(),
                format!("predict_{prop}"),
                mode.as_str().to_string(),
                out.rmse,
            ));
            rows.push((
                "r2".to_string(),
                format!("predict_{prop}"),
                mode.as_str().to_string(),
                out.r2,
            ));
            for (id, p, t) in &out.predictions {
                let _ = writeln!(pred_lines, "{id},{prop},{},{p},{t}", mode.as_str());
            }
            println!("{prop} [{}]: rmse {:.4}, r2 {:.4}", mode.as_str(), out.rmse, out.r2);
        }
    }
    let dir = ctx.out.join("predict");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
    fs::write(dir.join("predictions.csv"), pred_lines)?;
    split.save(&dir.join("predict_split.csv"))?;
    ctx.write_manifest(
        &dir,
        &[
            "metrics.csv".to_string(),
            "predictions.csv".to_string(),
            "predict_split.csv".to_string(),
        ],
    )?;
    Ok(())
}

fn concat_features(
    a: &ordalign_core::autodiff::Tensor,
    b: &ordalign_core::autodiff::Tensor,
) -> ordalign_core::autodiff::Tensor {
    let (n, da) = (a.shape()[0], a.shape()[1]);
    let db = b.shape()[1];
    let mut data = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    ordalign_core::autodiff::Tensor::new(vec![n, da + db], data)
}

fn cmd_generate(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    ids: &[u64],
    descriptors: &[String],
    per_descriptor: usize,
    gen_seed: Option<u64>,
) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let split = ctx.load_split()?;
    let (model, _) = ctx.load_model(checkpoint)?;
    let dir = ctx.out.join("generate");
    fs::create_dir_all(&dir)?;

    let schedule = DiffusionSchedule::linear(ctx.cfg.diffgen.timesteps, 1e-4, 0.02)?;
    let gen_size = ctx.cfg.diffgen.gen_size;
    if ctx.cfg.rvegen.image_size % gen_size != 0 {
        return Err(Error::ConfigInvalid(format!(
            "diffgen.gen_size {gen_size} must divide rvegen.image_size {}",
            ctx.cfg.rvegen.image_size
        )));
    }
    let factor = ctx.cfg.rvegen.image_size / gen_size;

    let index = by_id(&dataset);
    let prior_path = dir.join("prior.bin");
    let decoder_path = dir.join("decoder.bin");
    let (prior, decoder) = if prior_path.exists() && decoder_path.exists() {
        (PriorNet::load(&prior_path)?, DecoderNet::load(&decoder_path)?)
    } else {
        log::info!("training diffusion prior and decoder on the train split");
        let train: Vec<&SamplePair> = split
            .train
            .iter()
            .map(|id| index.get(id).copied().ok_or(Error::MissingGroundTruth(*id)))
            .collect::<Result<_>>()?;
        let (hv, ht) = model.encode_samples(&train)?;
        let (prior, _) = train_prior(
            &ht.features,
            &hv.features,
            &schedule,
            &ctx.cfg.prior_train_config(),
        )?;
        let small: Vec<Microstructure> = train
            .iter()
            .map(|s| s.image.downsample(factor))
            .collect();
        let refs: Vec<&Microstructure> = small.iter().collect();
        let (decoder, _) = train_decoder(
            &refs,
            &hv.features,
            &schedule,
            &ctx.cfg.decoder_train_config(),
        )?;
        prior.save(&prior_path)?;
        decoder.save(&decoder_path)?;
        (prior, decoder)
    };

    // Requests: dataset ids (ground truth known) and free-form descriptors.
    let mut requests: Vec<(Vec<f64>, Option<&SamplePair>)> = Vec::new();
    for id in ids {
        let s = index.get(id).copied().ok_or(Error::MissingGroundTruth(*id))?;
        requests.push((s.descriptor.features().to_vec(), Some(s)));
    }
    for dtext in descriptors {
        let parts: Vec<&str> = dtext.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::ConfigInvalid(format!(
                "descriptor {dtext:?} must be \"vf,mma\""
            )));
        }
        let vf: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| Error::ConfigInvalid(format!("bad vf in {dtext:?}")))?;
        let mma: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::ConfigInvalid(format!("bad mma in {dtext:?}")))?;
        let d = rvegen::Descriptor::new(vf, mma, ctx.cfg.rvegen.r_f)?;
        requests.push((d.features().to_vec(), None));
    }
    if requests.is_empty() {
        return Err(Error::ConfigInvalid(
            "generate needs at least one --id or --descriptor".into(),
        ));
    }

    let seed0 = gen_seed.unwrap_or(ctx.cfg.seed);
    let mut csv = String::from("vf,mma,fiber_count,seed,psnr_vs_ground_truth,image_path\n");
    let mut files = vec!["generations.csv".to_string(), "prior.bin".to_string(), "decoder.bin".to_string()];
    let mut idx = 0usize;
    for (row, truth) in &requests {
        for rep in 0..per_descriptor.max(1) {
            let seed = seed0.wrapping_add(idx as u64).wrapping_add(rep as u64 * 7919);
            let img = generate(row, &model, &prior, &decoder, &schedule, seed)?;
            let name = format!("gen_{idx:04}.pgm");
            rvegen::write_pgm(&dir.join(&name), &img.quantized())?;
            let psnr_text = match truth {
                Some(s) => format!("{}", psnr(&img, &s.image.downsample(factor))?),
                None => String::new(),
            };
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                row[0], row[1], row[2] as usize, seed, psnr_text, name
            );
            files.push(name);
            idx += 1;
        }
    }
    fs::write(dir.join("generations.csv"), csv)?;
    ctx.write_manifest(&dir, &files)?;
    println!("wrote {idx} generated images to {}", dir.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let split = ctx.load_split()?;
    let (model, _) = ctx.load_model(checkpoint)?;
    let index = by_id(&dataset);
    let test: Vec<&SamplePair> = split
        .test
        .iter()
        .map(|id| index.get(id).copied().ok_or(Error::MissingGroundTruth(*id)))
        .collect::<Result<_>>()?;
    let (hv, ht) = model.encode_samples(&test)?;
    let dir = ctx.out.join("eval");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut metric_rows = Vec::new();

    for (prop_idx, prop) in ["yield_strength", "elongation"].iter().enumerate() {
        let values: Vec<f64> = test.iter().map(|s| s.targets.as_array()[prop_idx]).collect();
        let (matrix, order) = similarity_matrix(&hv, &ht, &values)?;
        let n = matrix.shape()[0];
        let sorted_ids: Vec<u64> = order.iter().map(|&i| test[i].id).collect();
        let mut csv = String::from("id");
        for id in &sorted_ids {
            let _ = write!(csv, ",{id}");
        }
        csv.push('\n');
        for i in 0..n {
            let _ = write!(csv, "{}", sorted_ids[i]);
            for j in 0..n {
                let _ = write!(csv, ",{}", matrix.at(&[i, j]));
            }
            csv.push('\n');
        }
        let name = format!("similarity_{prop}.csv");
        fs::write(dir.join(&name), csv)?;
        files.push(name);
        let (near, far) = band_means(&matrix, 5, 30);
        metric_rows.push((
            "near_diag_mean".to_string(),
            format!("similarity_{prop}"),
            "cross".to_string(),
            near,
        ));
        metric_rows.push((
            "far_offdiag_mean".to_string(),
            format!("similarity_{prop}"),
            "cross".to_string(),
            far,
        ));
    }

    // Stacked 2-D projection of both modalities.
    let stacked = concat_rows(&hv.features, &ht.features);
    let proj = project_2d(&stacked)?;
    let mut csv = String::from("id,modality,x,y,yield_strength,elongation\n");
    for (i, s) in test.iter().chain(test.iter()).enumerate() {
        let modality = if i < test.len() { "vision" } else { "tabular" };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            s.id,
            modality,
            proj.coords.at(&[i, 0]),
            proj.coords.at(&[i, 1]),
            s.targets.yield_strength,
            s.targets.elongation
        );
    }
    fs::write(dir.join("projection.csv"), csv)?;
    files.push("projection.csv".to_string());
    fs::write(dir.join("metrics.csv"), metrics_csv(&metric_rows))?;
    files.push("metrics.csv".to_string());
    ctx.write_manifest(&dir, &files)?;
    for (m, t, _, v) in &metric_rows {
        println!("{t} {m} = {v:.4}");
    }
    Ok(())
}

fn concat_rows(
    a: &ordalign_core::autodiff::Tensor,
    b: &ordalign_core::autodiff::Tensor,
) -> ordalign_core::autodiff::Tensor {
    let d = a.shape()[1];
    let mut data = Vec::with_capacity((a.shape()[0] + b.shape()[0]) * d);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    ordalign_core::autodiff::Tensor::new(vec![a.shape()[0] + b.shape()[0], d], data)
}
