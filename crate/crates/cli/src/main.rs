use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nlspn::backprop::gradcheck;
use nlspn::io::{self, config::RunConfig, fmt_sig, read_depth_png16, read_map, write_depth_png16, write_map, FloatMap};
use nlspn::learner::{ablation_grid, fit, init_depth_idw, AblationRow, FitConfig, IdwParams};
use nlspn::metrics::{evaluate, evaluate_banded, CSV_HEADER};
use nlspn::norm::{mc_normalization_probability, sample_normalized_pairs};
use nlspn::propagation::propagate;
use nlspn::scenes::{discontinuity_mask, generate, sample_detailed};
use nlspn::{AffinityField, ConfidenceMap, Field2D, Mask, NormScheme, PropagationInputs, SparseDepth};

#[derive(Parser)]
#[command(name = "nlspn", version, about = "Non-local spatial propagation for depth completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its sparse samples.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagate an initial depth with stored or default parameters.
    Propagate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate step as one multi-channel map.
        #[arg(long)]
        trace: bool,
    },
    /// Fit per-pixel propagation parameters to a synthetic scene.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid and write one CSV row per configuration.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute error metrics of a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Restrict to pixels near ground-truth discontinuities.
        #[arg(long)]
        band: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo probability that a scheme renormalizes N(0, 1) affinities.
    McNorm {
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        /// C for tanh-c or gamma for tanh-gamma; defaults to K.
        #[arg(long)]
        param: Option<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Normalized weight pairs for K = 2, as CSV.
    NormPairs {
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        #[arg(long)]
        param: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    AbsSum,
    AbsSumStar,
    TanhC,
    TanhGamma,
}

impl SchemeArg {
    fn build(self, k: usize, param: Option<f64>) -> NormScheme {
        match self {
            SchemeArg::AbsSum => NormScheme::AbsSum,
            SchemeArg::AbsSumStar => NormScheme::AbsSumStar,
            SchemeArg::TanhC => NormScheme::TanhC {
                c: param.unwrap_or(k as f64),
            },
            SchemeArg::TanhGamma => {
                let base = NormScheme::tanh_gamma_default(k);
                match param {
                    Some(g) => match base {
                        NormScheme::TanhGammaAbsSumStar { gamma_min, gamma_max, .. } => {
                            NormScheme::TanhGammaAbsSumStar {
                                gamma: g,
                                gamma_min: gamma_min.min(g),
                                gamma_max: gamma_max.max(g),
                            }
                        }
                        other => other,
                    },
                    None => base,
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> nlspn::Result<ExitCode> {
    match command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Propagate {
            config,
            input,
            out,
            trace,
        } => propagate_cmd(&config, &input, &out, trace),
        Command::Fit { config, out } => fit_cmd(&config, &out),
        Command::Ablate { config, out } => ablate_cmd(&config, &out),
        Command::Eval { pred, gt, band, out } => eval_cmd(&pred, &gt, band, out.as_deref()),
        Command::McNorm {
            k,
            scheme,
            param,
            samples,
            seed,
        } => {
            let p = mc_normalization_probability(k, &scheme.build(k, param), samples, seed)?;
            println!("{}", fmt_sig(p));
            Ok(ExitCode::SUCCESS)
        }
        Command::NormPairs {
            scheme,
            param,
            samples,
            seed,
            out,
        } => {
            let pairs = sample_normalized_pairs(&scheme.build(2, param), samples, seed)?;
            let mut csv = String::from("w1,w2\n");
            for (a, b) in pairs {
                csv.push_str(&format!("{},{}\n", fmt_sig(a), fmt_sig(b)));
            }
            io::write_text(&out, &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, tol } => {
            let report = gradcheck(seed, tol)?;
            println!("{report}");
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn synth(spec: &Path, out: &Path) -> nlspn::Result<ExitCode> {
    let cfg = RunConfig::load(spec)?;
    let scene_spec = cfg.scene()?;
    let sampling = cfg.sampling()?;
    let scene = generate(scene_spec)?;
    let sampled = sample_detailed(&scene.depth, sampling)?;
    // fail before writing anything if the depths do not fit a 16-bit PNG
    io::png16::encode_depth(&scene.depth, None)?;
    io::create_dir(out)?;
    write_map(&out.join("gt.nlfm"), &FloatMap::from_field(&scene.depth)?)?;
    write_depth_png16(&out.join("gt.png"), &scene.depth, None)?;
    write_sparse(out, &sampled.sparse)?;
    write_map(&out.join("discontinuities.nlfm"), &FloatMap::from_mask(&scene.discontinuities)?)?;
    write_map(&out.join("corrupted.nlfm"), &FloatMap::from_mask(&sampled.corrupted)?)?;
    println!(
        "{}x{} scene, {} samples ({} corrupted) -> {}",
        scene_spec.height,
        scene_spec.width,
        sampled.sparse.mask().count(),
        sampled.corrupted.count(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_sparse(dir: &Path, sparse: &SparseDepth) -> nlspn::Result<()> {
    write_map(&dir.join("sparse.nlfm"), &FloatMap::from_field(sparse.depth())?)?;
    write_map(&dir.join("sparse_mask.nlfm"), &FloatMap::from_mask(sparse.mask())?)?;
    write_depth_png16(&dir.join("sparse.png"), sparse.depth(), Some(sparse.mask()))
}

fn read_sparse(dir: &Path) -> nlspn::Result<SparseDepth> {
    let depth = read_map(&dir.join("sparse.nlfm"))?.to_field()?;
    let mask = read_map(&dir.join("sparse_mask.nlfm"))?.to_mask()?;
    SparseDepth::new(depth, mask)
}

fn read_optional(path: &Path) -> nlspn::Result<Option<FloatMap>> {
    if path.exists() {
        read_map(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Reads `x0`, offsets, affinities and confidence from `input`, falling
/// back to IDW of the sparse samples, the mode's pattern, zero affinities
/// and the IDW confidence.
fn propagate_cmd(config: &Path, input: &Path, out: &Path, trace: bool) -> nlspn::Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let prop = cfg.propagation()?.clone();
    let idw = cfg.fit.as_ref().map_or_else(IdwParams::default, |f| f.idw);
    let sparse = read_sparse(input)?;
    let (h, w) = sparse.shape();
    let k = prop.neighbor_mode.k();
    let (idw_depth, idw_conf) = init_depth_idw(&sparse, &idw)?;
    let x0 = match read_optional(&input.join("x0.nlfm"))? {
        Some(m) => m.to_field()?,
        None => idw_depth,
    };
    let neighbors = match read_optional(&input.join("offsets.nlfm"))? {
        Some(m) => m.to_offsets()?,
        None => prop.neighbor_mode.initial_field(h, w)?,
    };
    let raw = match read_optional(&input.join("affinities.nlfm"))? {
        Some(m) => m.to_affinities()?,
        None => AffinityField::filled(h, w, k, 0.0)?,
    };
    let conf: ConfidenceMap = match read_optional(&input.join("confidence.nlfm"))? {
        Some(m) => m.to_confidence()?,
        None => idw_conf,
    };
    let mut inputs = PropagationInputs::new(&x0, &neighbors, &raw);
    if prop.use_confidence {
        inputs = inputs.with_confidence(&conf);
    }
    if prop.replace_seeds {
        inputs = inputs.with_seeds(&sparse);
    }
    let result = propagate(&inputs, &prop, trace)?;
    io::create_dir(out)?;
    write_map(&out.join("depth.nlfm"), &FloatMap::from_field(&result.output)?)?;
    write_depth_png16(&out.join("depth.png"), &clamp_for_png(&result.output)?, None)?;
    if let Some(mut states) = result.trace {
        // channel 0 is the initial depth
        states.insert(0, inputs.x0.clone());
        let c = states.len();
        let values = (0..h * w)
            .flat_map(|i| states.iter().map(move |s| s.values()[i] as f32))
            .collect();
        write_map(&out.join("trace.nlfm"), &FloatMap::new(h, w, c, values)?)?;
    }
    println!("{} steps of {} -> {}", prop.steps, prop.neighbor_mode.label(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// PNG can only hold `(0, 65535/256]`; predictions are clamped into it.
fn clamp_for_png(depth: &Field2D) -> nlspn::Result<Field2D> {
    depth.with_values(
        depth
            .values()
            .iter()
            .map(|&d| d.clamp(1.0 / io::PNG_DEPTH_SCALE, 65535.0 / io::PNG_DEPTH_SCALE))
            .collect(),
    )
}

fn scene_inputs(cfg: &RunConfig) -> nlspn::Result<(Field2D, SparseDepth)> {
    let scene = generate(cfg.scene()?)?;
    let sampled = sample_detailed(&scene.depth, cfg.sampling()?)?;
    Ok((scene.depth, sampled.sparse))
}

fn fit_cmd(config: &Path, out: &Path) -> nlspn::Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let prop = cfg.propagation()?.clone();
    let fit_cfg: FitConfig = *cfg.fit()?;
    let (gt, sparse) = scene_inputs(&cfg)?;
    let result = fit(&gt, &sparse, &fit_cfg, &prop)?;
    io::create_dir(out)?;
    let p = &result.params;
    write_map(&out.join("x0.nlfm"), &FloatMap::from_field(&p.x0)?)?;
    write_map(&out.join("offsets.nlfm"), &FloatMap::from_offsets(&p.neighbors)?)?;
    write_map(&out.join("affinities.nlfm"), &FloatMap::from_affinities(&p.raw)?)?;
    write_map(&out.join("confidence.nlfm"), &FloatMap::from_confidence(&p.conf)?)?;
    write_map(&out.join("prediction.nlfm"), &FloatMap::from_field(&result.prediction)?)?;
    write_map(&out.join("gt.nlfm"), &FloatMap::from_field(&gt)?)?;
    write_sparse(out, &sparse)?;

    let mut trace = String::from("iteration,loss,best\n");
    for (i, (l, b)) in result.loss_trace.iter().zip(result.best_so_far()).enumerate() {
        trace.push_str(&format!("{i},{},{}\n", fmt_sig(*l), fmt_sig(b)));
    }
    io::write_text(&out.join("trace.csv"), &trace)?;

    let mut metrics = format!("set,{CSV_HEADER}\nall,{}\n", result.metrics.csv_row());
    if let Some(b) = &result.band_metrics {
        metrics.push_str(&format!("band,{}\n", b.csv_row()));
    }
    io::write_text(&out.join("metrics.csv"), &metrics)?;

    // the learned scheme (gamma) goes back into the config for `propagate`
    let mut resolved = cfg.clone();
    if let Some(pc) = resolved.propagation.as_mut() {
        pc.scheme = p.scheme;
    }
    io::write_text(&out.join("config.toml"), &resolved.to_toml_string()?)?;

    print!("{metrics}");
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(config: &Path, out: &Path) -> nlspn::Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let axes = cfg.ablation()?.axes();
    let base = cfg.propagation()?.clone();
    let fit_cfg = *cfg.fit()?;
    let (gt, sparse) = scene_inputs(&cfg)?;
    let rows = ablation_grid(&gt, &sparse, &axes, &fit_cfg, &base)?;
    let mut csv = AblationRow::csv_header();
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    io::write_text(out, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

/// Loads a depth map with its valid mask. PNG zeros are invalid; NLFM maps
/// count non-positive depths as invalid.
fn load_depth(path: &Path) -> nlspn::Result<(Field2D, Mask)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return read_depth_png16(path);
    }
    let field = read_map(path)?.to_field()?;
    let (h, w) = field.shape();
    let valid = Mask::new(h, w, field.values().iter().map(|&v| v > 0.0).collect())?;
    Ok((field, valid))
}

fn eval_cmd(pred: &Path, gt: &Path, band: bool, out: Option<&Path>) -> nlspn::Result<ExitCode> {
    let (p, _) = load_depth(pred)?;
    let (g, valid) = load_depth(gt)?;
    let report = if band {
        evaluate_banded(&p, &g, &valid, &discontinuity_mask(&g).dilate(nlspn::learner::BOUNDARY_BAND_RADIUS))?
    } else {
        evaluate(&p, &g, &valid)?
    };
    let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row());
    if let Some(path) = out {
        io::write_text(path, &csv)?;
    }
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
