//! Command-line entry point: configure, run, and record experiments.
//! Exit codes: 0 success, 1 configuration or data error, 2 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ptmda::autodiff::Real;
use ptmda::checks::run_gradient_suite;
use ptmda::config::{config_to_text, load_config, set_key};
use ptmda::data::{dump_csv_domain, gen_synthetic, load_csv_domain, Domain, DomainRole, SyntheticFamily, SyntheticSpec};
use ptmda::error::{Error, Result};
use ptmda::eval::{accuracy, run_ablation, standard_variants, VariantSpec};
use ptmda::nn::{load_checkpoint, peek_checkpoint_precision, predict_average, save_checkpoint, ModelBundle};
use ptmda::trainer::{run_ptmda, Precision, TrainConfig};

#[derive(Parser)]
#[command(name = "ptmda", version, about = "Multi-source domain adaptation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Every configuration key as an optional flag; set flags override the
/// config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    use_adv: Option<bool>,
    #[arg(long)]
    use_mc: Option<bool>,
    #[arg(long)]
    use_pt: Option<bool>,
    #[arg(long)]
    detach_phi: Option<bool>,
    #[arg(long)]
    refresh_pseudo_labels: Option<bool>,
    #[arg(long)]
    hidden_dims: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    disc_hidden: Option<usize>,
    #[arg(long)]
    d0: Option<usize>,
    #[arg(long)]
    d_r: Option<usize>,
    #[arg(long)]
    norm_eps: Option<f64>,
    #[arg(long)]
    norm_momentum: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                set_key(cfg, key, &v)?;
            }
            Ok(())
        };
        set("lr", self.lr.map(|v| v.to_string()))?;
        set("momentum", self.momentum.map(|v| v.to_string()))?;
        set("weight_decay", self.weight_decay.map(|v| v.to_string()))?;
        set("kappa", self.kappa.map(|v| v.to_string()))?;
        set("epochs_stage1", self.epochs_stage1.map(|v| v.to_string()))?;
        set("epochs_stage2", self.epochs_stage2.map(|v| v.to_string()))?;
        set("batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("norm", self.norm.clone())?;
        set("use_adv", self.use_adv.map(|v| v.to_string()))?;
        set("use_mc", self.use_mc.map(|v| v.to_string()))?;
        set("use_pt", self.use_pt.map(|v| v.to_string()))?;
        set("detach_phi", self.detach_phi.map(|v| v.to_string()))?;
        set("refresh_pseudo_labels", self.refresh_pseudo_labels.map(|v| v.to_string()))?;
        set("hidden_dims", self.hidden_dims.clone())?;
        set("feature_dim", self.feature_dim.map(|v| v.to_string()))?;
        set("disc_hidden", self.disc_hidden.map(|v| v.to_string()))?;
        set("d0", self.d0.map(|v| v.to_string()))?;
        set("d_r", self.d_r.map(|v| v.to_string()))?;
        set("norm_eps", self.norm_eps.map(|v| v.to_string()))?;
        set("norm_momentum", self.norm_momentum.map(|v| v.to_string()))?;
        set("precision", self.precision.clone())?;
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic domains and write one CSV per domain.
    Generate {
        /// rotated-moons | shifted-gaussians
        #[arg(long, default_value = "rotated-moons")]
        family: String,
        /// Rotation angles in degrees, comma-separated; last is the target.
        #[arg(long, default_value = "0,30,60,90")]
        angles: String,
        /// Per-domain mean shifts as semicolon-separated points, e.g. "0,0;2,1".
        #[arg(long)]
        shifts: Option<String>,
        /// Per-domain covariance scales, comma-separated.
        #[arg(long)]
        cov_scales: Option<String>,
        #[arg(long, default_value_t = 2)]
        n_classes: usize,
        #[arg(long, default_value_t = 500)]
        n_per_domain: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on labeled source CSVs against an unlabeled (or held-out
    /// labeled) target CSV; writes checkpoint, report, and loss trace.
    Train {
        /// Flat key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Labeled source CSV; repeat per domain.
        #[arg(long = "source", required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        /// Run directory for model.ckpt, report.json, loss_trace.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint's ensemble accuracy on a labeled CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON output path; defaults to evaluation.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid and write its CSV and JSON tables.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "source", required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds, one full run per (variant, seed).
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        /// Variant names to run; defaults to the full grid.
        #[arg(long)]
        variants: Option<String>,
        /// Parallel runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the gradient-check battery.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gradcheck.json")]
        out: PathBuf,
    },
    /// Write feature embeddings of a CSV's rows for external plotting.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            if matches!(e, Error::Numeric(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate {
            family,
            angles,
            shifts,
            cov_scales,
            n_classes,
            n_per_domain,
            noise_std,
            seed,
            out_dir,
        } => cmd_generate(
            &family, &angles, shifts.as_deref(), cov_scales.as_deref(), n_classes,
            n_per_domain, noise_std, seed, &out_dir,
        ),
        Cmd::Train { config, sources, target, out, overrides } => {
            let cfg = effective_config(config.as_deref(), &overrides)?;
            match cfg.precision {
                Precision::F64 => cmd_train::<f64>(&cfg, &sources, &target, &out),
                Precision::F32 => cmd_train::<f32>(&cfg, &sources, &target, &out),
            }
        }
        Cmd::Evaluate { checkpoint, data, out } => {
            match peek_checkpoint_precision(&checkpoint)?.as_str() {
                "f64" => cmd_evaluate::<f64>(&checkpoint, &data, out.as_deref()),
                "f32" => cmd_evaluate::<f32>(&checkpoint, &data, out.as_deref()),
                other => Err(Error::Config(format!("unsupported checkpoint precision {other:?}"))),
            }
        }
        Cmd::Ablate { config, sources, target, out, seeds, variants, jobs, overrides } => {
            let cfg = effective_config(config.as_deref(), &overrides)?;
            let seeds = parse_u64_list(&seeds)?;
            let variants = select_variants(variants.as_deref())?;
            match cfg.precision {
                Precision::F64 => cmd_ablate::<f64>(&cfg, &sources, &target, &out, &variants, &seeds, jobs),
                Precision::F32 => cmd_ablate::<f32>(&cfg, &sources, &target, &out, &variants, &seeds, jobs),
            }
        }
        Cmd::Gradcheck { instances, seed, out } => cmd_gradcheck(instances, seed, &out),
        Cmd::DumpEmbeddings { checkpoint, data, out } => {
            match peek_checkpoint_precision(&checkpoint)?.as_str() {
                "f64" => cmd_dump_embeddings::<f64>(&checkpoint, &data, &out),
                "f32" => cmd_dump_embeddings::<f32>(&checkpoint, &data, &out),
                other => Err(Error::Config(format!("unsupported checkpoint precision {other:?}"))),
            }
        }
    }
}

fn effective_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("not a number: {p:?}")))
        })
        .collect()
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("not an integer: {p:?}")))
        })
        .collect()
}

fn select_variants(names: Option<&str>) -> Result<Vec<VariantSpec>> {
    let all = standard_variants();
    let Some(names) = names else { return Ok(all) };
    names
        .split(',')
        .map(|raw| {
            let name = raw.trim();
            all.iter()
                .find(|v| v.name == name)
                .cloned()
                .ok_or_else(|| {
                    let known: Vec<&str> = all.iter().map(|v| v.name.as_str()).collect();
                    Error::Config(format!("unknown variant {name:?} (known: {})", known.join(", ")))
                })
        })
        .collect()
}

fn domain_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "domain".into())
}

fn load_domains<T: Real>(
    sources: &[PathBuf],
    target: &Path,
) -> Result<(Vec<Domain<T>>, Domain<T>)> {
    let sources = sources
        .iter()
        .map(|p| load_csv_domain(p, domain_name(p), DomainRole::Source))
        .collect::<Result<Vec<_>>>()?;
    let target = load_csv_domain(target, domain_name(target), DomainRole::Target)?;
    Ok((sources, target))
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    family: &str,
    angles: &str,
    shifts: Option<&str>,
    cov_scales: Option<&str>,
    n_classes: usize,
    n_per_domain: usize,
    noise_std: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let family = match family {
        "rotated-moons" => SyntheticFamily::RotatedMoons { angles_deg: parse_f64_list(angles)? },
        "shifted-gaussians" => {
            let shifts = shifts
                .ok_or_else(|| Error::Config("shifted-gaussians requires --shifts".into()))?
                .split(';')
                .map(parse_f64_list)
                .collect::<Result<Vec<_>>>()?;
            let cov_scales = match cov_scales {
                Some(text) => parse_f64_list(text)?,
                None => vec![1.0; shifts.len()],
            };
            SyntheticFamily::ShiftedGaussians { shifts, cov_scales, n_classes }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown family {other:?} (rotated-moons|shifted-gaussians)"
            )))
        }
    };
    let spec = SyntheticSpec { family, n_per_domain, noise_std, seed };
    let domains: Vec<Domain<f64>> = gen_synthetic(&spec)?;
    std::fs::create_dir_all(out_dir)?;
    for d in &domains {
        let path = out_dir.join(format!("{}.csv", d.name));
        dump_csv_domain(&path, d)?;
        println!("wrote {} ({} rows, {})", path.display(), d.len(), d.role);
    }
    Ok(())
}

fn cmd_train<T: Real>(
    cfg: &TrainConfig,
    sources: &[PathBuf],
    target: &Path,
    out: &Path,
) -> Result<()> {
    let (sources, target) = load_domains::<T>(sources, target)?;
    let (bundle, report) = run_ptmda(&sources, &target, cfg)?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join("model.ckpt"), &bundle)?;
    report.save_json(&out.join("report.json"))?;
    report.save_loss_trace_csv(&out.join("loss_trace.csv"))?;
    std::fs::write(out.join("config.txt"), config_to_text(cfg))?;
    if let Some(acc) = report.target_accuracy {
        println!("target accuracy: {acc}");
    }
    if let Some(count) = report.pseudo_label_count {
        println!("pseudo labels admitted: {count}");
    }
    println!("run written to {}", out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct Evaluation {
    checkpoint: String,
    data: String,
    n_rows: usize,
    accuracy: f64,
}

fn cmd_evaluate<T: Real>(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let bundle: ModelBundle<T> = load_checkpoint(checkpoint)?;
    let domain: Domain<T> = load_csv_domain(data, domain_name(data), DomainRole::Target)?;
    let truth = domain
        .y
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: no label column to evaluate against", data.display())))?;
    let (pred, _) = predict_average(&bundle, &domain.x)?;
    let acc = accuracy(&pred, truth)?;
    let evaluation = Evaluation {
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        n_rows: domain.len(),
        accuracy: acc,
    };
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("evaluation.json"),
    };
    std::fs::write(&out_path, serde_json::to_string_pretty(&evaluation)?)?;
    println!("accuracy: {acc}");
    println!("evaluation written to {}", out_path.display());
    Ok(())
}

fn cmd_ablate<T: Real>(
    cfg: &TrainConfig,
    sources: &[PathBuf],
    target: &Path,
    out: &Path,
    variants: &[VariantSpec],
    seeds: &[u64],
    jobs: usize,
) -> Result<()> {
    let (sources, target) = load_domains::<T>(sources, target)?;
    let table = run_ablation(&sources, &target, cfg, variants, seeds, jobs)?;
    std::fs::create_dir_all(out)?;
    table.save_csv(&out.join("ablation.csv"))?;
    table.save_json(&out.join("ablation.json"))?;
    for (name, stats) in &table.summary {
        println!("{name}: {:.4} ± {:.4} over {} seeds", stats.mean, stats.std, stats.n);
    }
    println!("tables written to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64, out: &Path) -> Result<()> {
    let report = run_gradient_suite(instances, seed)?;
    for f in &report.families {
        println!("{}: max relative error {:.3e}", f.family, f.max_rel_err);
    }
    println!(
        "overall max relative error {:.3e} (tolerance {:.0e})",
        report.max_rel_err, report.tolerance
    );
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!("report written to {}", out.display());
    if !report.pass {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {} exceeds {}",
            report.max_rel_err, report.tolerance
        )));
    }
    Ok(())
}

fn cmd_dump_embeddings<T: Real>(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let bundle: ModelBundle<T> = load_checkpoint(checkpoint)?;
    let domain: Domain<T> = load_csv_domain(data, domain_name(data), DomainRole::Target)?;
    let emb = bundle.embed(&domain.x)?;
    let &[n, k] = emb.shape() else {
        return Err(Error::Shape(format!("unexpected embedding shape {:?}", emb.shape())));
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(out)?;
    let mut header: Vec<String> = (0..k).map(|j| format!("e{j}")).collect();
    if domain.y.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..n {
        let mut record: Vec<String> =
            emb.values()[i * k..(i + 1) * k].iter().map(|v| format!("{v}")).collect();
        if let Some(y) = &domain.y {
            record.push(y[i].to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    println!("wrote {} ({n} rows, {k} dims)", out.display());
    Ok(())
}
