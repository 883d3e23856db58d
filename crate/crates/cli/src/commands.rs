//! Subcommand implementations. Each returns a [`Report`] so that the binary,
//! the integration tests and the acceptance suite share one code path.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use pip_hsi_core::compression::{compression_factor, LayerGeometry};
use pip_hsi_core::data::{extract_patches, split, synth_scene, HsiCube, PatchSet, SplitPolicy, SynthParams};
use pip_hsi_core::energy::{flops_count, peak_memory, pipeline_energy, ExecutionMode};
use pip_hsi_core::metrics::Metrics;
use pip_hsi_core::model::{build_model, Cnn3dOptions, Model, ModelSpec};
use pip_hsi_core::optim::TrainConfig;
use pip_hsi_core::pixel::{fit_transfer_function, sample_grid, FitDomain, PixelTransferModel, TransferSample};
use pip_hsi_core::train::{ablation_steps, evaluate, train, History};

use crate::checkpoint::save_checkpoint;
use crate::config::{
    default_custom_bits, Arch, Architecture, DataSource, ModelConfig, RunConfig, SteChoice, TransferSection, Variant,
};
use crate::cube::read_cube;
use crate::error::{CliError, Result};
use crate::report::{fixed, sci, Report, Table};
use crate::transfer_io::read_transfer;

/// Train and test patches plus the scene dimensions they came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: PatchSet,
    pub test: PatchSet,
    pub bands: usize,
    pub classes: usize,
    pub class_names: Vec<String>,
}

/// The configured scene(s) after normalization and band removal, before patching.
pub fn load_scenes(cfg: &RunConfig, seed: u64) -> Result<(HsiCube, Option<HsiCube>)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let p = SynthParams {
                noise: d.noise,
                ..SynthParams::new(d.classes, d.bands, d.size, d.separation, d.synth_seed.unwrap_or(seed))
            };
            Ok((synth_scene(&p)?, None))
        }
        DataSource::Cube => {
            let prepare = |p: &Path| -> Result<HsiCube> {
                let mut cube = read_cube(&cfg.resolve(p))?;
                cube.drop_bands(&d.drop_bands)?;
                if d.normalize {
                    cube.normalize_min_max();
                }
                Ok(cube)
            };
            let main = prepare(d.cube.as_deref().expect("validated at load"))?;
            let test = d.test_cube.as_deref().map(prepare).transpose()?;
            Ok((main, test))
        }
    }
}

pub fn load_dataset(cfg: &RunConfig, patch_size: usize, seed: u64) -> Result<Dataset> {
    let (main, test_scene) = load_scenes(cfg, seed)?;
    let pad = cfg.data.pad.into();
    let mut set = extract_patches(&main, patch_size, pad)?.with_scene_id(0);
    let mut class_names = main.class_names.clone();
    let policy = match &test_scene {
        Some(t) => {
            if t.bands != main.bands {
                return Err(CliError::Usage(format!(
                    "test scene has {} bands, training scene {}",
                    t.bands, main.bands
                )));
            }
            if t.n_classes() > class_names.len() {
                class_names = t.class_names.clone();
            }
            set.extend(&extract_patches(t, patch_size, pad)?.with_scene_id(1))?;
            SplitPolicy::ByScene { train_scenes: vec![0] }
        }
        None => {
            SplitPolicy::RandomFraction { fraction: cfg.data.train_fraction, seed: cfg.data.split_seed.unwrap_or(seed) }
        }
    };
    let (train, test) = split(&set, &policy)?;
    info!("dataset bands={} classes={} train={} test={}", main.bands, set.n_classes, train.len(), test.len());
    Ok(Dataset { train, test, bands: main.bands, classes: set.n_classes, class_names })
}

/// Result of fitting the behavioral pixel model.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: PixelTransferModel,
    pub samples: Vec<TransferSample>,
    /// RMSE on the midpoints of the fitting grid.
    pub held_out_rmse: f64,
}

pub fn fit_transfer(t: &TransferSection, seed: u64) -> Result<FitOutcome> {
    if t.n_w < 2 || t.n_x < 2 {
        return Err(CliError::Usage("transfer sampling grid needs at least 2 points per axis".into()));
    }
    let pixel = t.pixel();
    let domain = t.domain();
    let samples = sample_grid(&pixel, domain, t.n_w, t.n_x, seed)?;
    let model = fit_transfer_function(&samples, t.basis())?;
    let (hw, hx) = (
        (domain.w_max - domain.w_min) / (t.n_w - 1) as f64 / 2.0,
        (domain.x_max - domain.x_min) / (t.n_x - 1) as f64 / 2.0,
    );
    let mid = FitDomain::new(domain.w_min + hw, domain.w_max - hw, domain.x_min + hx, domain.x_max - hx);
    let held_out = sample_grid(&pixel, mid, t.n_w - 1, t.n_x - 1, seed.wrapping_add(1))?;
    let held_out_rmse = model.rmse_on(&held_out);
    info!("transfer fit basis={} rmse={:e} held_out_rmse={:e}", model.basis.name(), model.rmse, held_out_rmse);
    Ok(FitOutcome { model, samples, held_out_rmse })
}

/// The configured transfer model: loaded from `[transfer] path`, or fitted.
pub fn obtain_transfer(cfg: &RunConfig, seed: u64) -> Result<PixelTransferModel> {
    match &cfg.transfer.path {
        Some(p) => read_transfer(&cfg.resolve(p)),
        None => Ok(fit_transfer(&cfg.transfer, seed)?.model),
    }
}

pub fn fit_report(fit: &FitOutcome, t: &TransferSection) -> Report {
    let mut table = Table::new("transfer fit", &["field", "value"]);
    let m = &fit.model;
    for (k, v) in [
        ("basis", m.basis.name().to_string()),
        ("coefficients", m.coefficients.len().to_string()),
        ("samples", fit.samples.len().to_string()),
        ("w_range", format!("[{}, {}]", m.domain.w_min, m.domain.w_max)),
        ("x_range", format!("[{}, {}]", m.domain.x_min, m.domain.x_max)),
        ("fit_rmse", sci(m.rmse)),
        ("held_out_rmse", sci(fit.held_out_rmse)),
        ("held_out_rmse_over_v_sat", sci(fit.held_out_rmse / t.v_sat)),
    ] {
        table.row(vec![k.into(), v]);
    }
    Report { tables: vec![table], notes: Vec::new() }
}

/// Outcome of one training run.
pub struct RunOutcome {
    pub model: Model,
    pub history: History,
    pub metrics: Metrics,
}

/// Builds, trains and evaluates one architecture on `data`.
pub fn run_single(
    arch: &Architecture,
    ste: SteChoice,
    data: &Dataset,
    transfer: Option<&PixelTransferModel>,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let spec = arch.build(data.bands, data.classes);
    let transfer = if arch.pip() { Some(transfer.cloned().ok_or(pip_hsi_core::Error::MissingTransfer)?) } else { None };
    let mut model = build_model(&spec, transfer, seed)?;
    model.ste_mode = ste.mode();
    let start = Instant::now();
    let history = train(&mut model, &data.train, train_cfg)?;
    for r in &history.epochs {
        log::debug!(
            "epoch={} lr={:e} loss={:.6} train_oa={:.4} clamped={}",
            r.epoch,
            r.lr,
            r.loss,
            r.train_oa,
            r.clamped
        );
    }
    let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
    let metrics = evaluate(&model, eval_set)?;
    info!(
        "model={} epochs={} oa={:.4} aa={:.4} kappa={:.4} seconds={:.1}",
        spec.name,
        train_cfg.epochs,
        metrics.oa,
        metrics.aa,
        metrics.kappa,
        start.elapsed().as_secs_f64()
    );
    Ok(RunOutcome { model, history, metrics })
}

pub fn metrics_report(title: &str, m: &Metrics, class_names: &[String]) -> Report {
    let mut summary = Table::new(title, &["metric", "value"]);
    summary.row(vec!["OA".into(), fixed(m.oa, 6)]);
    summary.row(vec!["AA".into(), fixed(m.aa, 6)]);
    summary.row(vec!["Kappa".into(), fixed(m.kappa, 6)]);
    summary.row(vec!["samples".into(), m.confusion.total().to_string()]);
    let mut per_class = Table::new("per-class recall", &["class", "name", "samples", "recall"]);
    for (c, r) in m.per_class_recall.iter().enumerate() {
        per_class.row(vec![
            (c + 1).to_string(),
            class_names.get(c).cloned().unwrap_or_else(|| format!("class{}", c + 1)),
            m.confusion.row_sum(c).to_string(),
            r.map_or_else(|| "n/a".into(), |v| fixed(v, 6)),
        ]);
    }
    let n = m.confusion.n_classes();
    let headers: Vec<String> =
        std::iter::once("true\\pred".to_string()).chain((1..=n).map(|c| c.to_string())).collect();
    let mut confusion = Table::new("confusion matrix", &headers.iter().map(String::as_str).collect::<Vec<_>>());
    for (t, row) in m.confusion.rows().enumerate() {
        confusion.row(std::iter::once((t + 1).to_string()).chain(row.iter().map(u64::to_string)).collect());
    }
    Report { tables: vec![summary, per_class, confusion], notes: Vec::new() }
}

pub fn history_table(h: &History) -> Table {
    let mut t = Table::new("training history", &["epoch", "lr", "loss", "train_oa", "clamped"]);
    for r in &h.epochs {
        t.row(vec![r.epoch.to_string(), sci(r.lr), fixed(r.loss, 6), fixed(r.train_oa, 6), r.clamped.to_string()]);
    }
    t
}

/// Files written by `train`.
pub struct TrainArtifacts {
    pub report: Report,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, seed: u64, epochs: Option<usize>, out_dir: &Path) -> Result<TrainArtifacts> {
    let arch = cfg.model.resolve()?;
    let data = load_dataset(cfg, arch.patch_size(), seed)?;
    let transfer = if arch.pip() { Some(obtain_transfer(cfg, seed)?) } else { None };
    let train_cfg = cfg.train.to_config(seed, epochs);
    let run = run_single(&arch, cfg.model.ste, &data, transfer.as_ref(), &train_cfg, seed)?;
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &run.model, &arch, cfg.model.ste)?;
    let history = history_table(&run.history);
    let history_path = out_dir.join("history.csv");
    fs::write(&history_path, history.render_csv()).map_err(CliError::io(&history_path))?;
    let mut report = metrics_report("test metrics", &run.metrics, &data.class_names);
    report.notes.push(format!(
        "model {} trained for {} epochs on {} patches, evaluated on {}",
        run.model.spec().name,
        train_cfg.epochs,
        data.train.len(),
        if data.test.is_empty() { data.train.len() } else { data.test.len() }
    ));
    Ok(TrainArtifacts { report, checkpoint })
}

pub fn cmd_eval(cfg: &RunConfig, seed: u64, checkpoint: &Path) -> Result<Report> {
    let loaded = crate::checkpoint::load_checkpoint(checkpoint)?;
    let data = load_dataset(cfg, loaded.architecture.patch_size(), seed)?;
    let spec = loaded.model.spec();
    if (spec.bands, spec.n_classes) != (data.bands, data.classes) {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} bands / {} classes, data has {} / {}",
            spec.bands, spec.n_classes, data.bands, data.classes
        )));
    }
    let set = if data.test.is_empty() { &data.train } else { &data.test };
    let m = evaluate(&loaded.model, set)?;
    Ok(metrics_report("evaluation metrics", &m, &data.class_names))
}

/// One row of the compression report.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressRow {
    pub dataset: String,
    pub model: String,
    pub geometry: LayerGeometry,
}

/// The four published custom configurations. Band counts are those that make
/// the published factors come out exactly; the CNN-32H row uses a 5x5 patch.
pub fn reference_rows() -> Vec<CompressRow> {
    let row = |dataset: &str, model: &str, patch: usize, bands: usize, c_o: usize, n_bits: u32| CompressRow {
        dataset: dataset.into(),
        model: model.into(),
        geometry: LayerGeometry::new(
            patch,
            patch,
            1,
            bands,
            3,
            0,
            pip_hsi_core::compression::Hwd::new(1, 1, 3),
            c_o,
            n_bits,
        ),
    };
    vec![
        row("Indian Pines", "CNN-3D", 5, 198, 2, 6),
        row("Salinas", "CNN-3D", 5, 204, 2, 8),
        row("HyRANK", "CNN-3D", 5, 180, 2, 5),
        row("HyRANK", "CNN-32H", 5, 180, 4, 5),
    ]
}

pub fn compress_report(rows: &[CompressRow]) -> Result<Report> {
    let mut t = Table::new(
        "first-layer compression",
        &[
            "dataset",
            "model",
            "h_i",
            "w_i",
            "c_i",
            "d_i",
            "k",
            "p",
            "s_hwd",
            "c_o",
            "N",
            "h_o",
            "w_o",
            "d_o",
            "input_bits",
            "output_bits",
            "C",
            "C_exact",
        ],
    );
    for r in rows {
        let g = &r.geometry;
        let c = compression_factor(g)?;
        let o = c.output;
        t.row(vec![
            r.dataset.clone(),
            r.model.clone(),
            g.h_i.to_string(),
            g.w_i.to_string(),
            g.c_i.to_string(),
            g.d_i.to_string(),
            format!("{}x{}x{}", g.kernel.h, g.kernel.w, g.kernel.d),
            format!("{}x{}x{}", g.padding.h, g.padding.w, g.padding.d),
            format!("{}x{}x{}", g.stride.h, g.stride.w, g.stride.d),
            g.c_o.to_string(),
            g.n_bits.to_string(),
            o.h_o.to_string(),
            o.w_o.to_string(),
            o.d_o.to_string(),
            c.input_bits.to_string(),
            c.output_bits.to_string(),
            fixed(c.value(), 2),
            format!("{}/{}", c.factor.numer(), c.factor.denom()),
        ]);
    }
    Ok(Report { tables: vec![t], notes: Vec::new() })
}

/// Reference rows plus the CNN-32H row at its 3x3 training patch.
pub fn reference_compress_report() -> Result<Report> {
    let mut rows = reference_rows();
    let mut small = rows[3].clone();
    small.model = "CNN-32H (3x3 patch)".into();
    small.geometry.h_i = 3;
    small.geometry.w_i = 3;
    rows.push(small.clone());
    let mut report = compress_report(&rows)?;
    let c3 = compression_factor(&small.geometry)?.value();
    report.notes.push(format!(
        "the HyRANK CNN-32H factor of 5.00 requires a 5x5 input patch; at the 3x3 patch that model trains on, the same layer gives {c3:.2}"
    ));
    report.notes.push("band counts 198 / 204 / 180 are the counts that reproduce the published factors".into());
    Ok(report)
}

/// Compression of the configured model on the configured data.
pub fn configured_compress_report(cfg: &RunConfig, seed: u64) -> Result<Report> {
    let arch = cfg.model.resolve()?;
    let (scene, _) = load_scenes(cfg, seed)?;
    let spec = arch.build(scene.bands, scene.n_classes().max(1));
    let row = CompressRow {
        dataset: match cfg.data.source {
            DataSource::Synthetic => "synthetic".into(),
            DataSource::Cube => "cube".into(),
        },
        model: spec.name.clone(),
        geometry: spec.first_layer_geometry()?,
    };
    compress_report(&[row])
}

/// Baseline and custom variants of `model`, keeping its shared overrides.
pub fn variant_pair(model: &ModelConfig) -> Result<(Architecture, Architecture)> {
    let shared = |variant| ModelConfig {
        variant,
        hidden: model.hidden.clone(),
        patch_size: model.patch_size,
        ..ModelConfig::new(model.arch, variant)
    };
    let custom = ModelConfig { variant: Variant::Custom, ..model.clone() };
    Ok((shared(Variant::Baseline).resolve()?, custom.resolve()?))
}

pub fn energy_report(
    baseline: &ModelSpec,
    custom: &ModelSpec,
    energy: &crate::config::EnergySection,
) -> Result<Report> {
    let params = energy.params();
    let runs = [(ExecutionMode::Baseline, baseline), (ExecutionMode::Pop, custom), (ExecutionMode::Pip, custom)];
    let reports = runs
        .iter()
        .map(|(mode, spec)| pipeline_energy(spec, &params, *mode))
        .collect::<pip_hsi_core::Result<Vec<_>>>()?;
    let mut breakdown = Table::new("energy breakdown per classified pixel", &["component", "baseline", "pop", "pip"]);
    for (i, c) in reports[0].components.iter().enumerate() {
        let mut row = vec![c.label.to_string()];
        row.extend(reports.iter().map(|r| sci(r.components[i].energy)));
        breakdown.row(row);
    }
    let mut total = vec!["total".to_string()];
    total.extend(reports.iter().map(|r| sci(r.total)));
    breakdown.row(total);

    let mut workload = Table::new(
        "workload per classified pixel",
        &["mode", "model", "macs", "peak_activation_bytes", "transmitted_bits", "compute_energy", "total_energy"],
    );
    for ((mode, spec), r) in runs.iter().zip(&reports) {
        workload.row(vec![
            mode.name().into(),
            spec.name.clone(),
            flops_count(spec, *mode)?.to_string(),
            peak_memory(spec, energy.bits(), *mode)?.to_string(),
            r.transmitted_bits.to_string(),
            sci(r.compute_energy()),
            sci(r.total),
        ]);
    }

    let mut ratios = Table::new("reduction factors", &["quantity", "baseline/pip", "pop/pip"]);
    let ratio = |a: f64, b: f64| if b > 0.0 { fixed(a / b, 4) } else { "inf".into() };
    let sensing = |i: usize| reports[i].components[0].energy;
    let comm = |i: usize| reports[i].components[1].energy;
    for (name, f) in [
        ("sensing (S1)", &sensing as &dyn Fn(usize) -> f64),
        ("communication (S2)", &comm),
        ("compute", &|i: usize| reports[i].compute_energy()),
        ("total", &|i: usize| reports[i].total),
    ] {
        ratios.row(vec![name.into(), ratio(f(0), f(2)), ratio(f(1), f(2))]);
    }
    let mut notes =
        vec!["energy constants come from the [energy] config section; the defaults are unit placeholders".into()];
    notes.push(format!(
        "pip executes the first layer in the pixel array; its C1 compute term is zero and S2 carries {} bits",
        reports[2].transmitted_bits
    ));
    Ok(Report { tables: vec![breakdown, workload, ratios], notes })
}

/// One step of the ablation ladder with its test metrics.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub label: String,
    pub options: Cnn3dOptions,
    pub metrics: Metrics,
}

/// Ladder options for `cfg`: the standard CNN-3D sequence with the
/// configured hidden widths, patch size and activation bits.
pub fn ablation_options(cfg: &RunConfig) -> Result<Vec<(String, Cnn3dOptions)>> {
    if cfg.model.arch != Arch::Cnn3d {
        return Err(CliError::Usage("the ablation ladder is defined for arch = \"cnn3d\"".into()));
    }
    let bits = match cfg.model.quant_bits {
        Some(0) | None => default_custom_bits(Arch::Cnn3d),
        Some(n) => n,
    };
    Ok(ablation_steps(bits)
        .into_iter()
        .map(|s| {
            let mut o = s.options;
            if let Some(h) = &cfg.model.hidden {
                o.hidden = h.clone();
            }
            if let Some(p) = cfg.model.patch_size {
                o.patch_size = p;
            }
            (s.label, o)
        })
        .collect())
}

pub fn run_ablation(cfg: &RunConfig, seed: u64, epochs: Option<usize>) -> Result<Vec<AblationResult>> {
    let options = ablation_options(cfg)?;
    let data = load_dataset(cfg, options[0].1.patch_size, seed)?;
    let transfer = obtain_transfer(cfg, seed)?;
    let train_cfg = cfg.train.to_config(seed, epochs);
    options
        .into_iter()
        .map(|(label, o)| {
            info!("ablation step `{label}`");
            let run =
                run_single(&Architecture::Cnn3d(o.clone()), cfg.model.ste, &data, Some(&transfer), &train_cfg, seed)?;
            Ok(AblationResult { label, options: o, metrics: run.metrics })
        })
        .collect()
}

pub fn ablation_report(results: &[AblationResult]) -> Report {
    let mut steps = Table::new("ablation steps", &["step", "configuration", "OA", "AA", "Kappa"]);
    for (i, r) in results.iter().enumerate() {
        steps.row(vec![
            i.to_string(),
            r.label.clone(),
            fixed(r.metrics.oa, 6),
            fixed(r.metrics.aa, 6),
            fixed(r.metrics.kappa, 6),
        ]);
    }
    let mut deltas =
        Table::new("AA change per step (percentage points)", &["step", "change", "delta_AA", "cumulative_delta_AA"]);
    if let Some(base) = results.first() {
        for (i, pair) in results.windows(2).enumerate() {
            deltas.row(vec![
                (i + 1).to_string(),
                pair[1].label.clone(),
                fixed(100.0 * (pair[1].metrics.aa - pair[0].metrics.aa), 4),
                fixed(100.0 * (pair[1].metrics.aa - base.metrics.aa), 4),
            ]);
        }
    }
    Report { tables: vec![steps, deltas], notes: Vec::new() }
}

/// Writes a synthetic scene and returns a short description.
pub fn cmd_synth(params: &SynthParams, out: &Path, opts: crate::cube::WriteOptions) -> Result<Report> {
    let cube = synth_scene(params)?;
    crate::cube::write_cube(out, &cube, opts)?;
    let mut t = Table::new("synthetic scene", &["field", "value"]);
    for (k, v) in [
        ("height", cube.height.to_string()),
        ("width", cube.width.to_string()),
        ("bands", cube.bands.to_string()),
        ("classes", cube.n_classes().to_string()),
        ("separation", params.separation.to_string()),
        ("noise", params.noise.to_string()),
        ("seed", params.seed.to_string()),
        ("labeled_pixels", cube.labeled_pixels().to_string()),
    ] {
        t.row(vec![k.into(), v]);
    }
    Ok(Report { tables: vec![t], notes: Vec::new() })
}

/// Output directory: explicit flag, then the config's `output_dir`, then `out`.
pub fn output_dir(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.as_ref().map(|p| c.resolve(p))))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Convenience for tests: loads a config file and applies a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<(RunConfig, u64)> {
    let cfg = RunConfig::load(path)?;
    let seed = seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}
