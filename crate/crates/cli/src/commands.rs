use std::fs;
use std::path::{Path, PathBuf};

use forest_structure::als::{
    normalize_heights, rasterize_variables, read_points_csv, FlatGround, GroundRaster, PointsInput, NODATA,
};
use forest_structure::ensemble::{fuse_values, mean_band_name, tiled_inference, EnsemblePrediction, Tiling};
use forest_structure::evaluation::{diagnose, split_samples, training_means, Samples};
use forest_structure::model::{load_checkpoint, save_checkpoint, Ablation, Checkpoint, ModelConfig};
use forest_structure::synthetic::{generate_dataset, SceneConfig};
use forest_structure::tensor::gradcheck::{operation_suite, GradCheckOptions};
use forest_structure::tile::{BandInfo, Tile};
use forest_structure::training::{train_with_progress, write_history_csv, Acquisitions, TrainConfig};
use forest_structure::{model, Dataset, Error, GridSpec, SceneData, Split, SplitSpec, Variable};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::Recorder;
use crate::{AblateArgs, DeriveArgs, EvaluateArgs, Failure, FuseArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

/// Training run configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, rec: &mut Recorder) -> Result<T, Failure> {
    rec.input(path);
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn load_dataset(dir: &Path, rec: &mut Recorder) -> Result<Dataset, Failure> {
    rec.input(dir);
    Ok(Dataset::load(dir)?)
}

fn run_config(path: Option<&Path>, rec: &mut Recorder) -> Result<RunConfig, Failure> {
    let cfg = match path {
        Some(p) => read_json(p, rec)?,
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn synth(a: &SynthArgs, rec: &mut Recorder) -> CmdResult {
    let mut config: SceneConfig = match &a.config {
        Some(p) => read_json(p, rec)?,
        None => SceneConfig::default(),
    };
    config.width = a.size;
    config.height = a.size;
    let split = SplitSpec::default();
    let (scenes, dataset) = generate_dataset(&config, a.seed, a.scenes, split)?;
    dataset.save(&a.out)?;
    for (i, s) in scenes.iter().enumerate() {
        s.save(&a.out.join(format!("scene_{i:03}")))?;
    }
    rec.manifest.config = json!({ "scene": config, "split": split, "scenes": a.scenes });
    rec.manifest.seeds = std::iter::once(a.seed).chain(scenes.iter().map(|s| s.seed)).collect();
    rec.output(&a.out);
    eprintln!("wrote {} scenes of {}x{} to {}", a.scenes, a.size, a.size, a.out.display());
    Ok(())
}

fn parse_grid(s: &str) -> Result<GridSpec, Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::InvalidInput(format!("grid must be x0,y0,resolution,width,height, got {s}"));
    if parts.len() != 5 {
        return Err(bad().into());
    }
    let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
    let u = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
    Ok(GridSpec::new(f(0)?, f(1)?, f(2)?, u(3)?, u(4)?)?)
}

/// Mask plane if present, else the first band: nonzero and not no-data.
fn tile_mask(tile: &Tile) -> Result<Vec<bool>, Failure> {
    if let Some(m) = &tile.mask {
        return Ok(m.clone());
    }
    let band = tile
        .bands
        .first()
        .ok_or_else(|| Error::Format("mask tile has no bands".into()))?;
    let nodata = tile.header.bands[0].nodata;
    Ok(band
        .iter()
        .map(|&v| v != 0.0 && v.is_finite() && nodata.is_none_or(|n| v as f64 != n))
        .collect())
}

pub fn derive(a: &DeriveArgs, rec: &mut Recorder) -> CmdResult {
    let grid = parse_grid(&a.grid)?;
    rec.input(&a.points);
    let cloud = match read_points_csv(&a.points)? {
        PointsInput::Normalized(c) => c,
        PointsInput::Absolute(pts) => {
            if let Some(z) = a.ground_elevation {
                normalize_heights(&pts, &FlatGround(z))?
            } else if let Some(path) = &a.dtm {
                rec.input(path);
                let dtm = Tile::read(path)?;
                let band = dtm
                    .bands
                    .first()
                    .ok_or_else(|| Error::Format("terrain tile has no bands".into()))?;
                let ground = GroundRaster {
                    grid: dtm.grid(),
                    elevation: band.iter().map(|&v| v as f64).collect(),
                };
                normalize_heights(&pts, &ground)?
            } else {
                return Err(Error::InvalidInput(
                    "x,y,z input needs --ground-elevation or --dtm".into(),
                )
                .into());
            }
        }
    };
    let mask = match &a.mask {
        Some(p) => {
            rec.input(p);
            let t = Tile::read(p)?;
            if t.header.width != grid.width || t.header.height != grid.height {
                return Err(Error::Shape(format!(
                    "mask is {}x{}, grid is {}x{}",
                    t.header.width, t.header.height, grid.width, grid.height
                ))
                .into());
            }
            Some(tile_mask(&t)?)
        }
        None => None,
    };
    let raster = rasterize_variables(&cloud, &grid, mask.as_deref())?;
    ensure_parent(&a.out)?;
    Tile::from(&raster).write(&a.out)?;
    rec.manifest.config = json!({ "grid": grid, "points": cloud.len(), "ground_elevation": a.ground_elevation });
    rec.output(&a.out);
    let forested = raster.forested.iter().filter(|&&f| f).count();
    eprintln!("{} points, {forested} of {} cells forested", cloud.len(), grid.len());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// `member_00.ckpt` → `member_00.history.csv`.
fn history_path(out: &Path) -> PathBuf {
    out.with_extension("history.csv")
}

pub fn train(a: &TrainArgs, rec: &mut Recorder) -> CmdResult {
    let mut cfg = run_config(a.config.as_deref(), rec)?;
    cfg.train.member = a.member;
    let dataset = load_dataset(&a.data, rec)?;
    rec.manifest.config = serde_json::to_value(&cfg)?;
    rec.manifest.seeds = vec![cfg.train.seed, cfg.train.member_seed()];
    let outcome = train_with_progress(&cfg.model, &cfg.train, &dataset, |r| {
        let train = r.train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        eprintln!("epoch {:>3}  train {train}  val {:.4}  lr {:.1e}", r.epoch, r.val_loss, r.lr);
    })?;
    ensure_parent(&a.out)?;
    let ck = Checkpoint {
        params: outcome.params,
        optimizer: Some(outcome.optimizer),
        extra: json!({
            "member": a.member,
            "seed": cfg.train.seed,
            "ablation": cfg.train.ablation,
            "best_epoch": outcome.best_epoch,
        }),
    };
    save_checkpoint(&a.out, &ck)?;
    let hist = history_path(&a.out);
    write_history_csv(&hist, &outcome.history)?;
    rec.output(&a.out);
    rec.output(&hist);
    eprintln!("best epoch {}", outcome.best_epoch);
    Ok(())
}

fn member_paths(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no *.ckpt members in {}", dir.display())).into());
    }
    Ok(paths)
}

pub fn predict(a: &PredictArgs, rec: &mut Recorder) -> CmdResult {
    let mut members = Vec::new();
    for p in member_paths(&a.models)? {
        rec.input(&p);
        members.push(load_checkpoint(&p)?.params);
    }
    rec.input(&a.scene);
    let scene = SceneData::load(&a.scene)?;
    let tiling = Tiling {
        window: a.window,
        stride: a.stride,
        keep: a.keep,
        ..Tiling::default()
    };
    let acq = Acquisitions {
        optical: a.optical,
        asc: a.asc,
        desc: a.desc,
        use_desc: a.descending,
    };
    let pred = tiled_inference(&members, &scene, acq, &tiling)?;
    ensure_parent(&a.out)?;
    pred.to_tile(*scene.grid())?.write(&a.out)?;
    rec.manifest.config = json!({
        "members": members.len(),
        "tiling": tiling,
        "acquisitions": { "optical": a.optical, "asc": a.asc, "desc": a.desc, "descending": a.descending },
    });
    rec.output(&a.out);
    eprintln!("{} members over {}x{}", members.len(), scene.width(), scene.height());
    Ok(())
}

pub fn fuse(a: &FuseArgs, rec: &mut Recorder) -> CmdResult {
    let mut preds = Vec::new();
    let mut grid: Option<GridSpec> = None;
    for p in &a.predictions {
        rec.input(p);
        let tile = Tile::read(p)?;
        let g = tile.grid();
        if let Some(first) = &grid {
            if *first != g {
                return Err(Error::Shape(format!("{} is on a different grid", p.display())).into());
            }
        }
        grid = Some(g);
        preds.push(EnsemblePrediction::from_tile(&tile)?);
    }
    let grid = grid.ok_or_else(|| Error::Empty("nothing to fuse".into()))?;
    let plane = grid.len();
    let mut bands = Vec::new();
    let mut count = vec![0f32; plane];
    for v in Variable::ALL {
        let mut out = vec![NODATA as f32; plane];
        for (cell, o) in out.iter_mut().enumerate() {
            let (means, vars): (Vec<f64>, Vec<f64>) =
                preds.iter().filter(|p| p.covered(cell)).map(|p| p.value(v, cell)).unzip();
            count[cell] = means.len() as f32;
            if !means.is_empty() {
                *o = fuse_values(&means, &vars)? as f32;
            }
        }
        bands.push((BandInfo::new(mean_band_name(v), v.unit(), Some(NODATA)), out));
    }
    bands.push((BandInfo::new("coverage", "", None), count));
    ensure_parent(&a.out)?;
    Tile::new(&grid, bands, None)?.write(&a.out)?;
    rec.manifest.config = json!({ "predictions": a.predictions.len() });
    rec.output(&a.out);
    Ok(())
}

/// Prediction tiles named on the command line, or the `*.fstr` files of a
/// single directory in name order.
fn prediction_paths(args: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    if let [dir] = args {
        if dir.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "fstr"))
                .collect();
            v.sort();
            return Ok(v);
        }
    }
    Ok(args.to_vec())
}

pub fn evaluate(a: &EvaluateArgs, rec: &mut Recorder) -> CmdResult {
    let split: Split = a.split.parse()?;
    let dataset = load_dataset(&a.reference, rec)?;
    let paths = prediction_paths(&a.pred)?;
    if paths.len() != dataset.scenes.len() {
        return Err(Error::Shape(format!(
            "{} prediction tiles for {} scenes",
            paths.len(),
            dataset.scenes.len()
        ))
        .into());
    }
    let mut samples = Samples::new(1);
    for (i, p) in paths.iter().enumerate() {
        rec.input(p);
        let tile = Tile::read(p)?;
        let scene = &dataset.scenes[i];
        if tile.grid() != *scene.grid() {
            return Err(Error::Shape(format!("{} does not match scene {i}", p.display())).into());
        }
        let pred = EnsemblePrediction::from_tile(&tile)?;
        samples.extend_from(&pred, scene, dataset.row_splits(i)?.ranges(split))?;
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("no forested, predicted pixels in the {} split", a.split)).into());
    }
    let diag = diagnose(&samples, &training_means(&dataset)?, &a.split)?;
    diag.write(&a.out, a.plot)?;
    rec.manifest.config = json!({ "split": split, "plot": a.plot, "samples": samples.len() });
    rec.output(&a.out);
    println!("{}", diag.metrics);
    Ok(())
}

pub fn ablate(a: &AblateArgs, rec: &mut Recorder) -> CmdResult {
    let base = run_config(a.config.as_deref(), rec)?;
    let dataset = load_dataset(&a.data, rec)?;
    let ablations = a
        .configs
        .iter()
        .map(|s| s.parse::<Ablation>())
        .collect::<Result<Vec<_>, _>>()?;
    if a.members == 0 {
        return Err(Error::InvalidInput("at least one member per configuration".into()).into());
    }
    let norm = training_means(&dataset)?;
    fs::create_dir_all(&a.out)?;
    let mut results = serde_json::Map::new();
    let mut table = csv_header();
    for ab in &ablations {
        let mut members = Vec::new();
        for k in 0..a.members {
            let mut cfg = base.train.clone();
            cfg.ablation = *ab;
            cfg.member = k;
            rec.manifest.seeds.push(cfg.member_seed());
            let out = train_with_progress(&base.model, &cfg, &dataset, |_| {})?;
            eprintln!("{ab} member {k}: best epoch {}", out.best_epoch);
            members.push(out.params);
        }
        let samples = split_samples(&members, &dataset, Split::Test, &Tiling::default())?;
        let diag = diagnose(&samples, &norm, ab.key())?;
        diag.write(&a.out.join(ab.key()), false)?;
        for m in &diag.metrics.variables {
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                ab.key(),
                m.variable.name(),
                m.mae,
                m.mae_pct,
                m.rmse,
                m.rmse_pct,
                m.mbe,
                m.mbe_pct
            ));
        }
        println!("{}", diag.metrics);
        results.insert(ab.key().to_string(), serde_json::to_value(&diag.metrics)?);
    }
    fs::write(a.out.join("ablation.json"), serde_json::to_vec_pretty(&results)?)?;
    fs::write(a.out.join("ablation.csv"), table)?;
    rec.manifest.config = json!({
        "configs": ablations,
        "members": a.members,
        "model": base.model,
        "train": base.train,
    });
    rec.output(&a.out);
    Ok(())
}

fn csv_header() -> String {
    "config,variable,mae,mae_pct,rmse,rmse_pct,mbe,mbe_pct\n".to_string()
}

pub fn gradcheck(a: &GradcheckArgs, rec: &mut Recorder) -> CmdResult {
    let config: ModelConfig = match &a.config {
        Some(p) => read_json(p, rec)?,
        None => ModelConfig::desk(),
    };
    config.validate()?;
    let opts = GradCheckOptions {
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let mut rows = Vec::new();
    let mut worst = 0f64;
    for (name, report) in operation_suite(a.seed, &opts)? {
        worst = worst.max(report.max_rel_error);
        println!("{:<32} {:.3e}", name, report.max_rel_error);
        rows.push(json!({ "name": name, "max_rel_error": report.max_rel_error, "pass": report.passes(a.tolerance) }));
    }
    let net_opts = GradCheckOptions {
        max_coords_per_param: (a.coords > 0).then_some(a.coords),
        ..opts
    };
    let net = model::network_grad_check(&config, a.seed, 2, 5, &net_opts)?;
    worst = worst.max(net.max_rel_error);
    println!("{:<32} {:.3e}", "network", net.max_rel_error);
    let pass = worst < a.tolerance;
    let report = json!({
        "tolerance": a.tolerance,
        "operations": rows,
        "network": net,
        "max_rel_error": worst,
        "pass": pass,
    });
    ensure_parent(&a.out)?;
    fs::write(&a.out, serde_json::to_vec_pretty(&report)?)?;
    rec.manifest.config = json!({ "model": config, "tolerance": a.tolerance, "coords": a.coords });
    rec.manifest.seeds = vec![a.seed];
    rec.output(&a.out);
    if !pass {
        return Err(Failure::Check(format!(
            "gradient check failed: max relative error {worst:.3e} >= {:.1e}",
            a.tolerance
        )));
    }
    println!("max relative error {worst:.3e} < {:.1e}", a.tolerance);
    Ok(())
}
