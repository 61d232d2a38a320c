use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use perfrecon::gfbs::{reconstruct_series, GfbsConfig, History};
use perfrecon::kinetics::dce::{compute_dce_maps, DceConfig, VfaSeries};
use perfrecon::kinetics::dsc::{compute_dsc_maps, DscConfig};
use perfrecon::metrics::{bland_altman_points, map_agreement, masked_pairs, psnr, rmse, write_bland_altman_csv, Decibels, MetricsReport};
use perfrecon::phantom::{generate, read_region_csv, write_region_csv, PhantomSpec};
use perfrecon::sampler::{adjoint, forward_encode, make_mask, reference_scan, NoiseSpec, ReferenceScan, SamplingMask, Scheme};
use perfrecon::volume::{minmax_normalize, Container, ImageSeries, KSpaceSeries, MapKind, NormRange, ParameterMap, Payload};

const REFERENCE_R: f64 = 2.0;

#[derive(Parser)]
#[command(name = "perfrecon", version, about = "Undersampled perfusion MRI reconstruction and quantification")]
struct Cli {
    /// Worker threads for the compute stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a digital phantom with ground-truth maps.
    Phantom {
        /// Phantom description (JSON); defaults to the built-in one for --mode.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dsc")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize a series and simulate an undersampled, noisy acquisition.
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "radial")]
        scheme: SchemeArg,
        #[arg(long = "R", default_value_t = 4.0)]
        r: f64,
        #[arg(long, default_value_t = NoiseSpec::PROTOCOL_VARIANCE)]
        sigma2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a dynamic series from undersampled k-space.
    Recon {
        #[arg(long = "in", required_unless_present = "r_sweep")]
        input: Option<PathBuf>,
        #[arg(long, required_unless_present = "r_sweep")]
        mask: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "proposed")]
        method: Method,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fully sampled (normalized) series for RMSE / PSNR.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// First-frame reference scan; defaults to ref.pvol next to --in.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Re-sample --truth at each listed R and tabulate PSNR.
        #[arg(long = "R-sweep", value_delimiter = ',', requires = "truth")]
        r_sweep: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "radial")]
        scheme: SchemeArg,
        #[arg(long, default_value_t = NoiseSpec::PROTOCOL_VARIANCE)]
        sigma2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute perfusion maps from a dynamic series.
    Quantify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// CSV of x,y arterial voxels.
        #[arg(long)]
        aif: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// normalization.json written by `sample`; undoes the min-max scaling.
        #[arg(long)]
        norm: Option<PathBuf>,
        /// Flip-angle images (DCE); defaults to vfa.pvol next to the AIF file.
        #[arg(long)]
        vfa: Option<PathBuf>,
        /// Directory of reference maps to score agreement against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate the outputs below a run directory into summary.json.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Dsc,
    Dce,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Cartesian,
    Radial,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Cartesian => Scheme::CartesianVd,
            SchemeArg::Radial => Scheme::Radial,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Method {
    Proposed,
    Zerofill,
}

/// Contents of a `--config` file; every section is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    recon: GfbsConfig,
    dsc: DscConfig,
    dce: DceConfig,
}

#[derive(Serialize, Deserialize)]
struct VfaMeta {
    angles_deg: Vec<f64>,
    tr: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Phantom { spec, mode, out } => cmd_phantom(spec.as_deref(), mode, &out),
        Command::Sample {
            input,
            scheme,
            r,
            sigma2,
            seed,
            out,
        } => cmd_sample(&input, scheme.into(), r, sigma2, seed, &out),
        Command::Recon {
            input,
            mask,
            method,
            config,
            truth,
            reference,
            r_sweep,
            scheme,
            sigma2,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            match r_sweep {
                Some(rs) => cmd_sweep(truth.as_deref().unwrap(), &rs, scheme.into(), sigma2, seed, method, &cfg, &out),
                None => cmd_recon(
                    input.as_deref().unwrap(),
                    mask.as_deref().unwrap(),
                    method,
                    &cfg,
                    truth.as_deref(),
                    reference.as_deref(),
                    &out,
                ),
            }
        }
        Command::Quantify {
            input,
            mode,
            aif,
            config,
            norm,
            vfa,
            reference,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            cmd_quantify(&input, mode, &aif, &cfg, norm.as_deref(), vfa.as_deref(), reference.as_deref(), &out)
        }
        Command::Report { run } => cmd_report(&run),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let cfg: RunConfig = read_json(p)?;
    cfg.recon.validate()?;
    cfg.dsc.validate()?;
    cfg.dce.validate()?;
    Ok(cfg)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn load_series(path: &Path) -> Result<ImageSeries> {
    ImageSeries::load(path).with_context(|| format!("loading series {}", path.display()))
}

fn save_maps(maps: &[&ParameterMap], out: &Path) -> Result<()> {
    for m in maps {
        let stem = m.kind.label().to_lowercase();
        m.save(out.join(format!("{stem}.pvol")))?;
        m.write_pgm(out.join(format!("{stem}.pgm")))?;
    }
    Ok(())
}

fn cmd_phantom(spec_path: Option<&Path>, mode: Mode, out: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(p) => read_json(p)?,
        None => match mode {
            Mode::Dsc => PhantomSpec::dsc_default(),
            Mode::Dce => PhantomSpec::dce_default(),
        },
    };
    let ph = generate(&spec)?;
    out_dir(out)?;
    ph.truth.save(out.join("truth.pvol"))?;
    let maps: Vec<&ParameterMap> = ph.maps.iter().collect();
    save_maps(&maps, out)?;
    let codes: Vec<f32> = ph.labels.iter().map(|t| t.code() as f32).collect();
    let mut labels = ParameterMap::new(spec.nx, spec.ny, MapKind::M, codes)?;
    labels.units = "label".into();
    labels.save(out.join("labels.pvol"))?;
    labels.write_pgm(out.join("labels.pgm"))?;
    write_region_csv(&ph.aif_region, create(&out.join("aif.csv"))?)?;
    if let Some(vfa) = &ph.vfa {
        let data = vfa.images.iter().flatten().map(|&v| v as f32).collect();
        Container {
            dims: vec![vfa.nx as u32, vfa.ny as u32, vfa.images.len() as u32],
            dt: vfa.tr,
            payload: Payload::Float32(data),
        }
        .save(out.join("vfa.pvol"))?;
        write_json(
            &out.join("vfa.json"),
            &VfaMeta {
                angles_deg: vfa.angles_deg.clone(),
                tr: vfa.tr,
            },
        )?;
    }
    write_json(&out.join("resolved_config.json"), &json!({ "command": "phantom", "spec": spec }))
}

fn cmd_sample(input: &Path, scheme: Scheme, r: f64, sigma2: f64, seed: u64, out: &Path) -> Result<()> {
    let series = load_series(input)?;
    let (norm, range) = minmax_normalize(&series)?;
    let d = series.dims();
    let mask = make_mask(scheme, d.nx, d.ny, d.t, r, seed)?;
    let noise = NoiseSpec::new(sigma2, seed)?;
    let y = forward_encode(&norm, &mask, &noise)?;
    let reference = reference_scan(&norm, &mask, &noise, REFERENCE_R)?;
    out_dir(out)?;
    norm.save(out.join("normalized.pvol"))?;
    y.save(out.join("kspace.pvol"))?;
    mask.save(out.join("mask.pvol"))?;
    reference.save(out.join("ref.pvol"))?;
    write_json(&out.join("normalization.json"), &range)?;
    write_json(
        &out.join("resolved_config.json"),
        &json!({
            "command": "sample",
            "input": input,
            "scheme": scheme,
            "requested_r": r,
            "achieved_r": mask.acceleration(),
            "noise": noise,
            "reference_r": REFERENCE_R,
            "reference_samples": reference.mask.iter().filter(|&&b| b != 0).count(),
            "normalization": range,
        }),
    )
}

fn load_reference(kspace: &Path, explicit: Option<&Path>) -> Result<Option<ReferenceScan>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = kspace.with_file_name("ref.pvol");
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    ReferenceScan::load(&path)
        .map(Some)
        .with_context(|| format!("loading reference scan {}", path.display()))
}

struct ReconOutput {
    x: ImageSeries,
    history: Option<History>,
}

fn reconstruct(
    y: &KSpaceSeries,
    mask: &SamplingMask,
    reference: Option<&ReferenceScan>,
    method: Method,
    cfg: &GfbsConfig,
    truth: Option<&ImageSeries>,
) -> Result<ReconOutput> {
    if mask.dims() != y.dims() {
        bail!("mask dims {:?} do not match k-space dims {:?}", mask.dims(), y.dims());
    }
    Ok(match method {
        Method::Zerofill => ReconOutput {
            x: adjoint(y),
            history: None,
        },
        Method::Proposed => {
            let (x, h) = reconstruct_series(y, mask, reference, cfg, truth)?;
            ReconOutput { x, history: Some(h) }
        }
    })
}

fn image_metrics(x: &ImageSeries, truth: &ImageSeries) -> Result<MetricsReport> {
    Ok(MetricsReport {
        rmse: Some(rmse(x, truth)?),
        psnr_db: Some(Decibels(psnr(x, truth)?)),
        ..MetricsReport::default()
    })
}

fn cmd_recon(
    input: &Path,
    mask_path: &Path,
    method: Method,
    cfg: &RunConfig,
    truth_path: Option<&Path>,
    reference_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let y = KSpaceSeries::load(input).with_context(|| format!("loading k-space {}", input.display()))?;
    let mask = SamplingMask::load(mask_path).with_context(|| format!("loading mask {}", mask_path.display()))?;
    let truth = truth_path.map(load_series).transpose()?;
    let reference = match method {
        Method::Proposed => load_reference(input, reference_path)?,
        Method::Zerofill => None,
    };
    let rec = reconstruct(&y, &mask, reference.as_ref(), method, &cfg.recon, truth.as_ref())?;
    out_dir(out)?;
    rec.x.save(out.join("recon.pvol"))?;
    if let Some(h) = &rec.history {
        h.write_csv(create(&out.join("history.csv"))?)?;
    }
    if let Some(t) = &truth {
        write_json(&out.join("metrics.json"), &image_metrics(&rec.x, t)?)?;
    }
    write_json(
        &out.join("resolved_config.json"),
        &json!({
            "command": "recon",
            "input": input,
            "mask": mask_path,
            "method": method,
            "acceleration": mask.acceleration(),
            "reference_samples": reference.as_ref().map(|r| r.mask.iter().filter(|&&b| b != 0).count()),
            "reference_mask": reference.as_ref().map(|r| &r.mask),
            "recon": cfg.recon,
            "iterations": rec.history.as_ref().map(History::iterations),
            "stop_reason": rec.history.as_ref().and_then(|h| h.stop_reason.map(|s| s.label())),
        }),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    truth_path: &Path,
    rs: &[f64],
    scheme: Scheme,
    sigma2: f64,
    seed: u64,
    method: Method,
    cfg: &RunConfig,
    out: &Path,
) -> Result<()> {
    let truth = load_series(truth_path)?;
    let d = truth.dims();
    let noise = NoiseSpec::new(sigma2, seed)?;
    let mut rows = Vec::new();
    for &r in rs {
        let mask = make_mask(scheme, d.nx, d.ny, d.t, r, seed)?;
        let y = forward_encode(&truth, &mask, &noise)?;
        let reference = reference_scan(&truth, &mask, &noise, REFERENCE_R)?;
        let zf = adjoint(&y);
        let rec = reconstruct(&y, &mask, Some(&reference), method, &cfg.recon, Some(&truth))?;
        rows.push(json!({
            "R": r,
            "achieved_r": mask.acceleration(),
            "rmse": rmse(&rec.x, &truth)?,
            "psnr": Decibels(psnr(&rec.x, &truth)?),
            "rmse_zerofill": rmse(&zf, &truth)?,
            "psnr_zerofill": Decibels(psnr(&zf, &truth)?),
        }));
    }
    out_dir(out)?;
    let mut w = create(&out.join("sweep.csv"))?;
    writeln!(w, "R,rmse,psnr,rmse_zerofill,psnr_zerofill")?;
    for row in &rows {
        let f = |k: &str| match &row[k] {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        writeln!(w, "{},{},{},{},{}", f("R"), f("rmse"), f("psnr"), f("rmse_zerofill"), f("psnr_zerofill"))?;
    }
    w.flush()?;
    write_json(&out.join("sweep.json"), &rows)?;
    write_json(
        &out.join("resolved_config.json"),
        &json!({
            "command": "recon",
            "truth": truth_path,
            "r_sweep": rs,
            "scheme": scheme,
            "noise": noise,
            "method": method,
            "reference_r": REFERENCE_R,
            "recon": cfg.recon,
        }),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_quantify(
    input: &Path,
    mode: Mode,
    aif_path: &Path,
    cfg: &RunConfig,
    norm_path: Option<&Path>,
    vfa_path: Option<&Path>,
    reference: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut series = load_series(input)?;
    let range: Option<NormRange> = norm_path.map(read_json).transpose()?;
    if let Some(r) = &range {
        series = r.denormalize(&series);
    }
    let region = read_region_csv(BufReader::new(
        File::open(aif_path).with_context(|| format!("opening {}", aif_path.display()))?,
    ))?;
    let mut extra = json!({});
    let maps: Vec<ParameterMap> = match mode {
        Mode::Dsc => {
            let m = compute_dsc_maps(&series, &region, &cfg.dsc)?;
            extra["aif_fit"] = json!({ "k": m.aif.k_scale, "t0": m.aif.t0, "a": m.aif.a, "b": m.aif.b, "residual": m.aif.residual });
            vec![m.cbf, m.cbv, m.mtt]
        }
        Mode::Dce => {
            let vfa = load_vfa(vfa_path.map(Path::to_path_buf).unwrap_or_else(|| aif_path.with_file_name("vfa.pvol")))?;
            let m = compute_dce_maps(&series, &vfa, &region, &cfg.dce)?;
            extra["flagged_t1"] = json!(m.flagged_t1);
            extra["clamped_samples"] = json!(m.clamped_samples);
            extra["baseline_mismatches"] = json!(m.baseline_mismatches);
            vec![m.ktrans, m.vp, m.t1, m.m]
        }
    };
    out_dir(out)?;
    save_maps(&maps.iter().collect::<Vec<_>>(), out)?;
    if let Some(dir) = reference {
        let mut report = MetricsReport::default();
        let scored: &[MapKind] = match mode {
            Mode::Dsc => &[MapKind::Cbf, MapKind::Cbv, MapKind::Mtt],
            Mode::Dce => &[MapKind::Ktrans, MapKind::Vp],
        };
        for m in maps.iter().filter(|m| scored.contains(&m.kind)) {
            let key = m.kind.label().to_lowercase();
            let path = dir.join(format!("{key}.pvol"));
            let r = ParameterMap::load(&path, m.kind).with_context(|| format!("loading reference map {}", path.display()))?;
            let stats = map_agreement(m, &r)?;
            let (e, rv) = masked_pairs(m, &r)?;
            write_bland_altman_csv(&bland_altman_points(&e, &rv), create(&out.join(format!("bland_altman_{key}.csv")))?)?;
            report.ccc.insert(key.clone(), stats.ccc);
            report.bland_altman.insert(key, stats);
        }
        write_json(&out.join("metrics.json"), &report)?;
    }
    write_json(
        &out.join("resolved_config.json"),
        &json!({
            "command": "quantify",
            "input": input,
            "mode": mode,
            "aif_voxels": region.len(),
            "normalization": range,
            "reference": reference,
            "dsc": cfg.dsc,
            "dce": cfg.dce,
            "diagnostics": extra,
        }),
    )
}

fn load_vfa(path: PathBuf) -> Result<VfaSeries> {
    let meta: VfaMeta = read_json(&path.with_extension("json"))?;
    let c = Container::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(VfaSeries::from_series(&c.into_series()?, meta.angles_deg, meta.tr)?)
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    if !run_dir.is_dir() {
        bail!("run directory {} does not exist", run_dir.display());
    }
    let mut files = Vec::new();
    collect_files(run_dir, &mut files)?;
    files.sort();
    let mut summary: BTreeMap<String, Value> = BTreeMap::new();
    let mut artifacts: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for f in &files {
        let rel = f.strip_prefix(run_dir).unwrap_or(f).to_string_lossy().into_owned();
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == "metrics.json" {
            let v: Value = read_json(f)?;
            for (k, key) in [("psnr_db", "psnr"), ("rmse", "rmse")] {
                if !v[k].is_null() {
                    summary.insert(key.into(), v[k].clone());
                }
            }
            if let Some(ccc) = v["ccc"].as_object() {
                for (k, c) in ccc {
                    summary.insert(format!("ccc_{k}"), c.clone());
                }
            }
            if let Some(ba) = v["bland_altman"].as_object() {
                for (k, b) in ba {
                    summary.insert(format!("bland_altman_{k}"), b.clone());
                }
            }
            artifacts.entry("metrics").or_default().push(rel);
        } else if name == "history.csv" {
            let text = fs::read_to_string(f)?;
            let last = text.lines().skip(1).last().unwrap_or("");
            summary.insert("iterations".into(), json!(text.lines().count().saturating_sub(1)));
            summary.insert("final_history_row".into(), json!(last));
            artifacts.entry("history").or_default().push(rel);
        } else if name.starts_with("bland_altman_") && name.ends_with(".csv") {
            artifacts.entry("bland_altman").or_default().push(rel);
        } else if name.ends_with(".pgm") {
            artifacts.entry("previews").or_default().push(rel);
        } else if name == "sweep.json" {
            summary.insert("sweep".into(), read_json(f)?);
        }
    }
    summary.insert("artifacts".into(), json!(artifacts));
    write_json(&run_dir.join("summary.json"), &summary)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_sections_are_optional() {
        let cfg: RunConfig = serde_json::from_str(r#"{"dsc": {"svd_threshold": 0.2}}"#).unwrap();
        assert_eq!(cfg.dsc.svd_threshold, 0.2);
        assert_eq!(cfg.recon, GfbsConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
