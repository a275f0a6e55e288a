use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use retinex_mef::curve::{self, FusionRequest};
use retinex_mef::data_io::{self, DatasetSplit, SynthConfig};
use retinex_mef::losses::Ablation;
use retinex_mef::metrics::{self, MetricReport};
use retinex_mef::pipeline::{self, Decomposition};
use retinex_mef::trainer::{self, manifest_hash, Checkpoint, Precision, TrainConfig, TrainOutput};
use retinex_mef::{Error, Result, Scalar, Tensor};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{AdjustArgs, Cli, Command, CurveArgs, EvalArgs, FuseArgs, PairArgs, PrecisionArg, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Fuse(a) => match a.pair.precision {
            PrecisionArg::F32 => fuse::<f32>(a),
            PrecisionArg::F64 => fuse::<f64>(a),
        },
        Command::Adjust(a) => match a.pair.precision {
            PrecisionArg::F32 => adjust::<f32>(a),
            PrecisionArg::F64 => adjust::<f64>(a),
        },
        Command::Decompose(a) => match a.precision {
            PrecisionArg::F32 => decompose::<f32>(a),
            PrecisionArg::F64 => decompose::<f64>(a),
        },
        Command::Eval(a) => eval(a),
        Command::Curve(a) => curve_table(a),
        Command::Synth(a) => synth(a),
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.crop_size {
        cfg.crop_size = v;
    }
    if let Some(v) = a.crops_per_scene {
        cfg.crops_per_scene = v;
    }
    if let Some(p) = a.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(name) = &a.ablation {
        cfg.objective.ablation = Ablation::by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown ablation {name}; expected one of {:?}", Ablation::NAMES)))?;
    }
    cfg.validate()?;

    let mut data = data_io::load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    if a.test_count > 0 {
        let ids: Vec<String> = data.iter().map(|s| s.scene_id.clone()).collect();
        let split = DatasetSplit::new(&ids, a.test_count, cfg.seed)?;
        split.save(&a.out.join("split.json"))?;
        data.retain(|s| split.train.contains(&s.scene_id));
    }
    let out = TrainOutput { dir: Some(a.out.clone()), keep_all: a.keep_all };
    let ckpt = match cfg.precision {
        Precision::F32 => train_with::<f32>(&data, &cfg, a.resume.as_deref(), &out)?,
        Precision::F64 => train_with::<f64>(&data, &cfg, a.resume.as_deref(), &out)?,
    };

    let mut m = RunManifest::new("train", serde_json::to_value(&cfg)?);
    m.seed = Some(cfg.seed);
    if let Some(p) = &ckpt {
        m.checkpoint_sha256 = Some(manifest_hash(p)?);
        m.outputs.push(p.display().to_string());
        println!("{}", json!({ "checkpoint": p, "sha256": m.checkpoint_sha256 }));
    }
    m.write(&a.out, true)?;
    Ok(())
}

fn train_with<T: Scalar>(
    data: &[data_io::ExposureSequence],
    cfg: &TrainConfig,
    resume: Option<&Path>,
    out: &TrainOutput,
) -> Result<Option<PathBuf>> {
    let start = resume.map(|p| Checkpoint::<T>::load(p, Some(&cfg.arch))).transpose()?;
    Ok(trainer::train_loop::<T>(data, cfg, start, out)?.checkpoint_path)
}

fn load_pair<T: Scalar>(p: &PairArgs) -> Result<(Decomposition<T>, String)> {
    let under = data_io::read_image(&p.under)?.cast::<T>();
    let over = data_io::read_image(&p.over)?.cast::<T>();
    let ckpt = Checkpoint::<T>::load(&p.ckpt, None)?;
    let dec = pipeline::decompose(&under, &over, &ckpt.params)?;
    Ok((dec, manifest_hash(&p.ckpt)?))
}

fn pair_manifest<'a>(cmd: &'a str, p: &PairArgs, hash: String, extra: serde_json::Value) -> RunManifest<'a> {
    let mut m = RunManifest::new(
        cmd,
        json!({
            "under": p.under,
            "over": p.over,
            "ckpt": p.ckpt,
            "precision": p.precision,
            "request": extra,
        }),
    );
    m.checkpoint_sha256 = Some(hash);
    m
}

fn write_fused<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    data_io::write_image(path, &img.cast::<f32>())
}

fn fuse<T: Scalar>(a: &FuseArgs) -> Result<()> {
    let req = match (a.k, a.exposure) {
        (_, Some(e)) => FusionRequest::target(e),
        (k, None) => FusionRequest::direct(k.unwrap_or(curve::DEFAULT_K)),
    };
    let (dec, hash) = load_pair::<T>(&a.pair)?;
    let fused = pipeline::fuse(&dec, &req)?;
    write_fused(&a.pair.out, &fused.image)?;
    let report = json!({ "k": fused.k, "achieved_exposure": fused.exposure, "out": a.pair.out });
    println!("{report}");
    let mut m = pair_manifest("fuse", &a.pair, hash, serde_json::to_value(req)?);
    m.outputs.push(a.pair.out.display().to_string());
    m.write(&a.pair.out, false)?;
    Ok(())
}

fn adjust<T: Scalar>(a: &AdjustArgs) -> Result<()> {
    let grid = pipeline::parse_sweep(&a.sweep)?;
    let (dec, hash) = load_pair::<T>(&a.pair)?;
    let results = pipeline::adjust_sweep(&dec, &grid)?;
    fs::create_dir_all(&a.pair.out)?;
    let mut csv = String::from("target,achieved,k,file\n");
    let mut m = pair_manifest("adjust", &a.pair, hash, json!({ "sweep": a.sweep, "grid": grid }));
    for (i, (f, &e)) in results.iter().zip(&grid).enumerate() {
        let name = format!("fused_{i:02}_E{e:.3}.png");
        write_fused(&a.pair.out.join(&name), &f.image)?;
        writeln!(csv, "{e},{:.9},{:.12},{name}", f.exposure, f.k).expect("string write");
        m.outputs.push(name);
    }
    fs::write(a.pair.out.join("sweep.csv"), csv)?;
    m.write(&a.pair.out, true)?;
    Ok(())
}

fn decompose<T: Scalar>(a: &PairArgs) -> Result<()> {
    let (dec, hash) = load_pair::<T>(a)?;
    pipeline::dump_components(&a.out, &dec)?;
    pair_manifest("decompose", a, hash, json!(null)).write(&a.out, true)?;
    Ok(())
}

fn find_fused(dir: &Path, scene: &str) -> Result<PathBuf> {
    ["png", "ppm"]
        .iter()
        .map(|ext| dir.join(format!("{scene}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Ingest { path: dir.join(scene), msg: "no fused image for scene".into() })
}

fn eval(a: &EvalArgs) -> Result<()> {
    let scenes = data_io::load_dataset(&a.pairs)?;
    let mut csv = format!("scene,{}\n", MetricReport::CSV_HEADER);
    let mut reports = Vec::with_capacity(scenes.len());
    for seq in &scenes {
        let fused = data_io::read_image(&find_fused(&a.fused, &seq.scene_id)?)?;
        let r = metrics::evaluate(&fused, seq.under(), seq.over())?;
        writeln!(csv, "{},{}", seq.scene_id, r.csv_fields()).expect("string write");
        reports.push(r);
    }
    writeln!(csv, "mean,{}", MetricReport::mean(&reports).csv_fields()).expect("string write");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, csv)?;
    let mut m = RunManifest::new("eval", json!({ "pairs": a.pairs, "fused": a.fused }));
    m.outputs.push(a.out.display().to_string());
    m.write(&a.out, false)?;
    Ok(())
}

fn curve_table(a: &CurveArgs) -> Result<()> {
    let rows = curve::curve_table(a.samples, &a.ks)?;
    let mut csv = String::from("x,k,f\n");
    for (x, k, f) in rows {
        writeln!(csv, "{x},{k},{f}").expect("string write");
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, csv)?;
    let mut m = RunManifest::new("curve", json!({ "samples": a.samples, "ks": a.ks }));
    m.outputs.push(a.out.display().to_string());
    m.write(&a.out, false)?;
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let scenes = data_io::synth_dataset(&cfg, a.count)?;
    let mut m = RunManifest::new("synth", serde_json::to_value(&cfg)?);
    m.seed = Some(cfg.seed);
    for seq in &scenes {
        data_io::write_sequence(&a.out, seq)?;
        m.outputs.push(seq.scene_id.clone());
    }
    m.write(&a.out, true)?;
    Ok(())
}
