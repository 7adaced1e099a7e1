//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mcrecon::baselines::CsTvConfig;
use mcrecon::eval::{evaluate, make_samples, mean_metrics, reconstruct, Method, ModelRef};
use mcrecon::metrics::{metrics_to_csv, write_metrics_csv};
use mcrecon::model::{load_checkpoint, save_checkpoint, Parameters};
use mcrecon::phantom::{load_dataset, save_dataset, simulate_dataset, subject_split, DatasetSlice};
use mcrecon::train::{fit, write_log_csv, TrainSample};
use mcrecon::{Contrast, ImageSlice, LossWeights, ModelConfig, ModelWeights, TrainConfig, TrainMode};

use crate::config::{parse_list, ConfigFile};
use crate::plot::{render_panels, save_gray_png};
use crate::{
    Cli, Command, CsTvArgs, DataArgs, EvaluateArgs, ModelArgs, OptimArgs, PlotArgs, ReconstructArgs, SimulateArgs,
    SweepArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let seed = file.seed(cli.seed)?;
    match cli.command {
        Command::Simulate(a) => simulate(&a, &file, seed),
        Command::Train(a) => train(&a, &file, seed),
        Command::Reconstruct(a) => reconstruct_cmd(&a, &file, seed),
        Command::Evaluate(a) => evaluate_cmd(&a, &file, seed),
        Command::SweepCascades(a) => sweep(&a, &file, seed),
        Command::Plot(a) => plot(&a, &file, seed),
    }
}

fn required(file: &ConfigFile, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
    file.resolve_opt(flag.map(|p| p.display().to_string()), key)?
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("missing --{} (or `{key}` in the config file)", key.replace('_', "-")))
}

fn simulate(a: &SimulateArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let out = required(file, a.out.clone(), "out")?;
    let n = file.resolve(a.n, "n", 20usize)?;
    let per = file.resolve(a.slices_per_subject, "slices_per_subject", 1usize)?;
    let size = match &a.size {
        Some(v) => v.clone(),
        None => match file.raw("size") {
            Some(s) => parse_list(s)?,
            None => vec![64, 64],
        },
    };
    let [h, w] = size[..] else {
        bail!("size needs exactly two values, got {size:?}");
    };
    if n == 0 || per == 0 {
        bail!("n and slices_per_subject must be positive");
    }
    let slices = simulate_dataset(n, per, h, w, seed)?;
    let manifest = save_dataset(&slices, &out)?;
    println!(
        "wrote {} slices ({} subjects, {h}x{w}) to {}",
        manifest.count,
        n,
        out.display()
    );
    Ok(())
}

/// Resolved dataset and undersampling settings.
struct DataSetup {
    slices: Vec<DatasetSlice>,
    accel: f64,
    center_fraction: f64,
    target: Contrast,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
}

impl DataSetup {
    fn load(a: &DataArgs, file: &ConfigFile, seed: u64) -> Result<Self> {
        let dir = required(file, a.data.clone(), "data")?;
        let (slices, _) = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
        let target: Contrast = file.resolve(a.target.clone(), "target", "T2".into())?.parse()?;
        Ok(DataSetup {
            slices,
            accel: file.resolve(a.accel, "accel", 4.0)?,
            center_fraction: file.resolve(a.center_fraction, "center_fraction", 0.04)?,
            target,
            val_fraction: file.resolve(a.val_fraction, "val_fraction", 0.15)?,
            test_fraction: file.resolve(a.test_fraction, "test_fraction", 0.15)?,
            seed,
        })
    }

    fn split(&self, name: &str) -> Result<Vec<usize>> {
        if name == "all" {
            return Ok((0..self.slices.len()).collect());
        }
        let (tr, va, te) = subject_split(&self.slices, self.val_fraction, self.test_fraction, self.seed)?;
        match name {
            "train" => Ok(tr),
            "val" => Ok(va),
            "test" => Ok(te),
            _ => bail!("unknown split {name:?} (expected train, val, test or all)"),
        }
    }

    fn samples(&self, indices: &[usize]) -> Result<Vec<TrainSample>> {
        Ok(make_samples(
            &self.slices,
            indices,
            self.target,
            self.accel,
            self.center_fraction,
            self.seed,
        )?)
    }
}

fn model_config(a: &ModelArgs, file: &ConfigFile) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let embed_dim = file.resolve(a.embed_dim, "embed_dim", d.embed_dim)?;
    let flag_off = |set: bool| if set { Some(false) } else { None };
    let cfg = ModelConfig {
        n_cascades: file.resolve(a.n_cascades, "n_cascades", d.n_cascades)?,
        n_swintb_per_swinrn: file.resolve(a.n_blocks, "n_blocks", d.n_swintb_per_swinrn)?,
        n_swintl_per_swintb: file.resolve(a.n_layers, "n_layers", d.n_swintl_per_swintb)?,
        embed_dim,
        window_size: file.resolve(a.window_size, "window_size", d.window_size)?,
        n_heads: file.resolve(a.n_heads, "n_heads", d.n_heads)?,
        mlp_hidden: file.resolve(a.mlp_hidden, "mlp_hidden", 2 * embed_dim)?,
        share_weights_across_cascades: file.resolve(flag_off(a.no_share), "share_weights", true)?,
        use_kf: file.resolve(flag_off(a.no_kf), "use_kf", true)?,
        use_cc: file.resolve(flag_off(a.no_cc), "use_cc", true)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &OptimArgs, data: &DataSetup, file: &ConfigFile) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let lw = LossWeights::default();
    let mode: TrainMode = file.resolve(a.mode.clone(), "mode", d.mode.name().into())?.parse()?;
    let cfg = TrainConfig {
        lr: file.resolve(a.lr, "lr", d.lr)?,
        batch_size: file.resolve(a.batch_size, "batch_size", d.batch_size)?,
        epochs: file.resolve(a.epochs, "epochs", d.epochs)?,
        rho_range: (
            file.resolve(a.rho_min, "rho_min", d.rho_range.0)?,
            file.resolve(a.rho_max, "rho_max", d.rho_range.1)?,
        ),
        accel: data.accel,
        center_fraction: data.center_fraction,
        seed: data.seed,
        mode,
        loss: LossWeights {
            lambda1: file.resolve(a.lambda1, "lambda1", lw.lambda1)?,
            lambda2: file.resolve(a.lambda2, "lambda2", lw.lambda2)?,
            lambda3: file.resolve(a.lambda3, "lambda3", lw.lambda3)?,
            ..lw
        },
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cstv_config(a: &CsTvArgs, file: &ConfigFile) -> Result<CsTvConfig> {
    let d = CsTvConfig::default();
    let cfg = CsTvConfig {
        lambda_tv: file.resolve(a.lambda_tv, "lambda_tv", d.lambda_tv)?,
        max_iters: file.resolve(a.cstv_iters, "cstv_iters", d.max_iters)?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Train on the training split, validating on the validation split.
fn train_model(
    data: &DataSetup,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<mcrecon::train::FitResult> {
    let train_set = data.samples(&data.split("train")?)?;
    let val_set = data.samples(&data.split("val")?)?;
    let weights = ModelWeights::init(cfg, data.seed)?;
    Ok(fit(&train_set, &val_set, cfg, weights, tcfg, checkpoint_dir)?)
}

fn train(a: &TrainArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let data = DataSetup::load(&a.data, file, seed)?;
    let cfg = model_config(&a.model, file)?;
    let tcfg = train_config(&a.optim, &data, file)?;
    let out = required(file, a.out.clone(), "out")?;
    let ckpt_dir = file.resolve_opt(a.checkpoint_dir.clone().map(|p| p.display().to_string()), "checkpoint_dir")?;
    let log = file.resolve_opt(a.log.clone().map(|p| p.display().to_string()), "log")?;

    let result = train_model(&data, &cfg, &tcfg, ckpt_dir.as_deref().map(Path::new))?;
    save_checkpoint(&out, &cfg, &result.weights)?;
    if let Some(log) = log {
        write_log_csv(Path::new(&log), &result.log)?;
    }
    match result.log.last() {
        Some(r) => println!(
            "trained {} epochs ({} steps, mode {}): loss {:.5}, val PSNR {:.2} dB, SSIM {:.4}; checkpoint {}",
            r.epoch,
            r.step,
            r.mode,
            r.loss_total,
            r.val_psnr,
            r.val_ssim,
            out.display()
        ),
        None => println!("0 epochs: wrote initial weights to {}", out.display()),
    }
    Ok(())
}

fn parse_methods(text: &str) -> Result<Vec<Method>> {
    let methods = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Method>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        bail!("no method given");
    }
    Ok(methods)
}

/// Load a checkpoint only when the model method is among `methods`.
fn load_model_if_needed(
    methods: &[Method],
    flag: Option<PathBuf>,
    file: &ConfigFile,
) -> Result<Option<(ModelConfig, ModelWeights)>> {
    if !methods.contains(&Method::Model) {
        return Ok(None);
    }
    let path = required(file, flag, "checkpoint")?;
    Ok(Some(load_checkpoint(&path)?))
}

fn reconstruct_cmd(a: &ReconstructArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let data = DataSetup::load(&a.data, file, seed)?;
    let method: Method = file.resolve(a.method.clone(), "method", "zero".into())?.parse()?;
    let cstv = cstv_config(&a.cstv, file)?;
    let model = load_model_if_needed(&[method], a.checkpoint.clone(), file)?;
    let out = required(file, a.out.clone(), "out")?;
    let indices = match file.resolve_opt(a.slice, "slice")? {
        Some(i) => vec![i],
        None => data.split(&file.resolve(a.split.clone(), "split", "all".into())?)?,
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let model_ref = model.as_ref().map(|(c, w)| ModelRef { config: c, weights: w });
    for sample in data.samples(&indices)? {
        let img = reconstruct(method, &sample, &cstv, model_ref)?;
        let stem = format!("{}_{:04}", method.name(), sample.slice_id);
        write_raw_f32(&out.join(format!("{stem}.f32")), &img)?;
        save_gray_png(&out.join(format!("{stem}.png")), &img, 1)?;
    }
    println!("wrote {} {} reconstructions to {}", indices.len(), method, out.display());
    Ok(())
}

fn write_raw_f32(path: &Path, img: &ImageSlice) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn evaluate_cmd(a: &EvaluateArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let data = DataSetup::load(&a.data, file, seed)?;
    let methods = parse_methods(&file.resolve(a.method.clone(), "method", "zero,cstv".into())?)?;
    let cstv = cstv_config(&a.cstv, file)?;
    let model = load_model_if_needed(&methods, a.checkpoint.clone(), file)?;
    let split = file.resolve(a.split.clone(), "split", "all".into())?;
    let samples = data.samples(&data.split(&split)?)?;
    let model_ref = model.as_ref().map(|(c, w)| ModelRef { config: c, weights: w });
    let rows = evaluate(&samples, &methods, data.accel, &cstv, model_ref)?;
    match file.resolve_opt(a.out.clone().map(|p| p.display().to_string()), "out")? {
        Some(out) => {
            write_metrics_csv(Path::new(&out), &rows)?;
            for &m in &methods {
                if let Some((p, s)) = mean_metrics(&rows, m) {
                    println!("{m}: mean PSNR {p:.2} dB, SSIM {s:.4} over {} slices", samples.len());
                }
            }
        }
        None => print!("{}", metrics_to_csv(&rows)),
    }
    Ok(())
}

fn sweep(a: &SweepArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let data = DataSetup::load(&a.data, file, seed)?;
    let base = model_config(&a.model, file)?;
    let tcfg = train_config(&a.optim, &data, file)?;
    let counts: Vec<usize> = match (&a.cascades, file.raw("cascades")) {
        (Some(s), _) => parse_list(s)?,
        (None, Some(s)) => parse_list(s)?,
        (None, None) => vec![1, 2, 3],
    };
    let split = file.resolve(a.split.clone(), "split", "test".into())?;
    let eval_set = data.samples(&data.split(&split)?)?;
    let mut table = String::from("n_cascades,param_count,psnr,ssim\n");
    for n in counts {
        let cfg = ModelConfig { n_cascades: n, ..base.clone() };
        let result = train_model(&data, &cfg, &tcfg, None)?;
        let model = ModelRef {
            config: &cfg,
            weights: &result.weights,
        };
        let rows = evaluate(&eval_set, &[Method::Model], data.accel, &CsTvConfig::default(), Some(model))?;
        let (p, s) = mean_metrics(&rows, Method::Model).ok_or_else(|| anyhow!("empty {split} split"))?;
        let _ = writeln!(table, "{n},{},{p},{s}", result.weights.param_count());
        eprintln!("cascades {n}: PSNR {p:.2} dB, SSIM {s:.4}");
    }
    match file.resolve_opt(a.out.clone().map(|p| p.display().to_string()), "out")? {
        Some(out) => std::fs::write(&out, table).with_context(|| format!("writing {out}"))?,
        None => print!("{table}"),
    }
    Ok(())
}

fn plot(a: &PlotArgs, file: &ConfigFile, seed: u64) -> Result<()> {
    let data = DataSetup::load(&a.data, file, seed)?;
    let index = file.resolve(a.slice, "slice", 0usize)?;
    let cstv = cstv_config(&a.cstv, file)?;
    let out = required(file, a.out.clone(), "out")?;
    let mut methods = vec![Method::ZeroFill, Method::CsTv];
    let ckpt = file.resolve_opt(a.checkpoint.clone().map(|p| p.display().to_string()), "checkpoint")?;
    if ckpt.is_some() {
        methods.push(Method::Model);
    }
    let model = load_model_if_needed(&methods, ckpt.map(PathBuf::from), file)?;
    let model_ref = model.as_ref().map(|(c, w)| ModelRef { config: c, weights: w });
    let sample = data.samples(&[index])?.remove(0);
    let gt = sample.x_gt.clone().expect("simulated samples carry ground truth");
    let recons = methods
        .iter()
        .map(|&m| reconstruct(m, &sample, &cstv, model_ref))
        .collect::<mcrecon::Result<Vec<_>>>()?;
    let error_range = file.resolve(a.error_range, "error_range", 0.2)?;
    let scale = file.resolve(a.scale, "scale", 2usize)?;
    if error_range.is_nan() || error_range <= 0.0 || scale == 0 {
        bail!("error_range and scale must be positive");
    }
    let img = render_panels(&gt, &sample.x_ref, &recons, error_range, scale);
    img.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} ({}; error range +-{error_range})",
        out.display(),
        methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}
