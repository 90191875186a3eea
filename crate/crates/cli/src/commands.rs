use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dsn3d_core::crf::{grid_search, refine_volume, CrfCase, CrfGrid, CrfParams};
use dsn3d_core::kv::KvMap;
use dsn3d_core::metrics::{evaluate, metrics_csv, voe, TABLE_HEADER};
use dsn3d_core::net::{conv_activations, forward, load_checkpoint, save_checkpoint};
use dsn3d_core::train::{train, Sample, TrainConfig};
use dsn3d_core::volume::{
    make_phantoms, normalize, read_labels, read_manifest, read_volume, write_labels, write_manifest,
    write_volume, ManifestEntry, PhantomSpec,
};
use dsn3d_core::{ArchitectureConfig, LabelVolume, Mask, NetworkParams, ProbMap, SegMetrics, Tensor, Volume};

use crate::args::{DumpArgs, EvalArgs, InferArgs, RefineArgs, SweepArgs, SynthArgs, Target, TrainArgs};
use crate::config::{is_window_key, prepare_out, resolve, window, window_kv, write_resolved};
use crate::error::{data, CliError, CliResult};

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const CURVE_NAME: &str = "curve.csv";
pub const MASK_NAME: &str = "mask.mhd";
pub const PROB_LAST_NAME: &str = "prob_last.mhd";
pub const TRAIN_CASES_DEFAULT: usize = 20;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn branch_prob_name(d: usize) -> String {
    format!("prob_branch{d}.mhd")
}

/// Reads a volume and its labels, checking that the grids agree.
fn load_case(entry: &ManifestEntry) -> CliResult<(Volume, LabelVolume)> {
    let volume = data(read_volume(&entry.volume))?;
    let (labels, _) = data(read_labels(&entry.labels))?;
    if labels.shape() != volume.shape {
        return Err(CliError::Data(format!(
            "case `{}`: labels {:?} do not match volume {:?}",
            entry.case_id,
            labels.shape(),
            volume.shape
        )));
    }
    Ok((volume, labels))
}

fn load_samples(manifest: &Path, lo: f64, hi: f64) -> CliResult<Vec<Sample>> {
    data(read_manifest(manifest))?
        .iter()
        .map(|e| {
            let (volume, labels) = load_case(e)?;
            Ok(Sample {
                input: data(normalize(&volume, lo, hi))?,
                labels,
            })
        })
        .collect()
}

/// `(case id, volume path, output subdirectory)` for every case of a target.
fn target_cases(target: &Target, out: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    match (&target.volume, &target.manifest) {
        (Some(v), None) => {
            let id = v.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(vec![(id, v.clone(), out.to_path_buf())])
        }
        (None, Some(m)) => Ok(data(read_manifest(m))?
            .into_iter()
            .map(|e| {
                let dir = out.join(&e.case_id);
                (e.case_id, e.volume, dir)
            })
            .collect()),
        _ => Err(CliError::Config("give exactly one of --volume or --manifest".into())),
    }
}

fn write_foreground(probs: &Tensor, spacing: [f64; 3], path: &Path) -> CliResult<()> {
    let s = probs.shape();
    let n = probs.len() / 2;
    let v = data(Volume::new([s[1], s[2], s[3]], probs.data()[n..].to_vec(), spacing))?;
    data(write_volume(&v, path))
}

fn read_foreground(path: &Path) -> CliResult<Tensor> {
    let v = data(read_volume(path))?;
    if let Some(p) = v.data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CliError::Data(format!("{}: probability {p} outside [0, 1]", path.display())));
    }
    let [d, h, w] = v.shape;
    let mut both: Vec<f64> = v.data.iter().map(|p| 1.0 - p).collect();
    both.extend_from_slice(&v.data);
    data(Tensor::new(vec![2, d, h, w], both))
}

/// Probability maps saved by `infer`: the last layer plus every branch file present.
fn load_probs(dir: &Path) -> CliResult<ProbMap> {
    let last = read_foreground(&dir.join(PROB_LAST_NAME))?;
    let mut branches = std::collections::BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(d) = name
            .strip_prefix("prob_branch")
            .and_then(|r| r.strip_suffix(".mhd"))
            .and_then(|d| d.parse::<usize>().ok())
        {
            let t = read_foreground(&entry.path())?;
            if t.shape() != last.shape() {
                return Err(CliError::Data(format!("{name}: shape {:?} differs from {PROB_LAST_NAME}", t.shape())));
            }
            branches.insert(d, t);
        }
    }
    Ok(ProbMap { last, branches })
}

pub fn synth(args: SynthArgs) -> CliResult<()> {
    let mut flags = KvMap::new();
    if let Some(c) = args.cases {
        flags.set("cases", c);
    }
    if let Some(t) = args.train_cases {
        flags.set("train_cases", t);
    }
    if let Some(s) = &args.shape {
        flags.set("shape", s);
    }
    if let Some(n) = args.noise_sigma {
        flags.set("noise_sigma", n);
    }
    let kv = resolve(&args.common, flags, |k| PhantomSpec::is_phantom_key(k) || k == "train_cases")?;
    let spec = PhantomSpec::default().apply_kv(&kv)?;
    let train_cases = kv.parsed_or("train_cases", TRAIN_CASES_DEFAULT.min(spec.cases))?;
    if train_cases > spec.cases {
        return Err(CliError::Config(format!(
            "train_cases {train_cases} exceeds cases {}",
            spec.cases
        )));
    }
    let out = &args.common.out;
    prepare_out(out)?;
    let mut entries = Vec::with_capacity(spec.cases);
    for (i, (volume, labels)) in make_phantoms(&spec)?.into_iter().enumerate() {
        let id = format!("case{i:03}");
        let vol_name = format!("{id}.mhd");
        let seg_name = format!("{id}_seg.mhd");
        data(write_volume(&volume, &out.join(&vol_name)))?;
        data(write_labels(&labels, volume.spacing, &out.join(&seg_name)))?;
        entries.push(ManifestEntry {
            case_id: id,
            volume: vol_name.into(),
            labels: seg_name.into(),
        });
    }
    data(write_manifest(&out.join("manifest.txt"), &entries))?;
    let (train_set, test_set) = entries.split_at(train_cases);
    if !train_set.is_empty() {
        data(write_manifest(&out.join("train.txt"), train_set))?;
    }
    if !test_set.is_empty() {
        data(write_manifest(&out.join("test.txt"), test_set))?;
    }
    let mut resolved = spec.to_kv();
    resolved.set("train_cases", train_cases);
    write_resolved(out, &resolved)?;
    log::info!(
        "wrote {} phantoms ({} train, {} test) to {}",
        entries.len(),
        train_set.len(),
        test_set.len(),
        out.display()
    );
    Ok(())
}

/// Architecture and training settings from a resolved map.
///
/// Without explicit `eta.*` keys the default weights are kept only for supervised layers.
pub fn train_settings(kv: &KvMap, no_deep_supervision: bool) -> CliResult<(ArchitectureConfig, TrainConfig)> {
    let mut arch = ArchitectureConfig::default().apply_kv(kv)?;
    if no_deep_supervision {
        arch = arch.without_deep_supervision();
    }
    let mut cfg = TrainConfig::default().apply_kv(kv)?;
    if kv.with_prefix("eta.").keys().next().is_none() {
        cfg.eta0.retain(|d, _| arch.supervised.contains(d));
    }
    Ok((arch, cfg))
}

pub fn is_train_command_key(key: &str) -> bool {
    ArchitectureConfig::is_arch_key(key) || TrainConfig::is_train_key(key) || is_window_key(key)
}

pub fn train_cmd(args: TrainArgs) -> CliResult<()> {
    let mut flags = KvMap::new();
    if let Some(e) = args.epochs {
        flags.set("epochs", e);
    }
    if let Some(l) = args.lr0 {
        flags.set("lr0", l);
    }
    if let Some(m) = args.momentum {
        flags.set("momentum", m);
    }
    if let Some(i) = &args.init {
        flags.set("init", i);
    }
    let kv = resolve(&args.common, flags, is_train_command_key)?;
    let (arch, cfg) = train_settings(&kv, args.no_deep_supervision)?;
    let (lo, hi) = window(&kv)?;
    let training = load_samples(&args.train, lo, hi)?;
    let validation = match &args.val {
        Some(v) => load_samples(v, lo, hi)?,
        None => Vec::new(),
    };
    let out = &args.common.out;
    prepare_out(out)?;
    let mut resolved = arch.to_kv();
    resolved.merge(&cfg.to_kv());
    resolved.merge(&window_kv(lo, hi));
    write_resolved(out, &resolved)?;
    log::info!(
        "training on {} cases, supervised layers {:?}, {} epochs",
        training.len(),
        arch.supervised,
        cfg.epochs
    );
    let (params, curve) = train(&training, &validation, &arch, &cfg, |r, _| {
        log::info!(
            "epoch {:>3}  loss {:.2}  main {:.2}  val_error {:.4}  lr {:e}",
            r.epoch,
            r.loss_total,
            r.loss_main,
            r.val_error,
            r.lr
        );
        Ok(())
    })?;
    data(save_checkpoint(&params, &out.join(CHECKPOINT_NAME)))?;
    let supervised: Vec<usize> = arch.supervised.iter().copied().collect();
    write_text(&out.join(CURVE_NAME), &curve.to_csv(&supervised))?;
    Ok(())
}

fn load_params(path: &Path) -> CliResult<NetworkParams> {
    data(load_checkpoint(path))
}

pub fn infer(args: InferArgs) -> CliResult<()> {
    let kv = resolve(&args.common, KvMap::new(), is_window_key)?;
    let (lo, hi) = window(&kv)?;
    let params = load_params(&args.checkpoint)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let mut resolved = window_kv(lo, hi);
    resolved.merge(&kv);
    write_resolved(out, &resolved)?;
    for (id, path, dir) in target_cases(&args.target, out)? {
        let volume = data(read_volume(&path))?;
        let x = data(normalize(&volume, lo, hi))?;
        let probs = data(forward(&params, &x))?;
        prepare_out(&dir)?;
        write_foreground(&probs.last, volume.spacing, &dir.join(PROB_LAST_NAME))?;
        for (d, t) in &probs.branches {
            write_foreground(t, volume.spacing, &dir.join(branch_prob_name(*d)))?;
        }
        let mask = probs.argmax_labels();
        data(write_labels(&mask, volume.spacing, &dir.join(MASK_NAME)))?;
        log::info!("{id}: {} foreground voxels", mask.count_foreground());
    }
    Ok(())
}

pub fn is_refine_key(key: &str) -> bool {
    CrfParams::is_crf_key(key) || is_window_key(key)
}

pub fn refine(args: RefineArgs) -> CliResult<()> {
    let mut flags = KvMap::new();
    let named = [
        ("mu1", args.mu1),
        ("mu2", args.mu2),
        ("theta_alpha", args.theta_alpha),
        ("theta_beta", args.theta_beta),
        ("theta_gamma", args.theta_gamma),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            flags.set(k, v);
        }
    }
    if let Some(i) = args.iterations {
        flags.set("iterations", i);
    }
    for t in &args.tau {
        let (d, w) = t
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--tau expects LAYER=WEIGHT, got `{t}`")))?;
        flags.set(format!("tau.{}", d.trim()), w.trim());
    }
    let kv = resolve(&args.common, flags, is_refine_key)?;
    let params = CrfParams::default().apply_kv(&kv)?;
    let (lo, hi) = window(&kv)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let mut resolved = params.to_kv();
    resolved.merge(&window_kv(lo, hi));
    if let Some(seed) = kv.get("seed") {
        resolved.set("seed", seed);
    }
    write_resolved(out, &resolved)?;
    let single = args.target.volume.is_some();
    for (id, path, dir) in target_cases(&args.target, out)? {
        let prob_dir = if single { args.prob_dir.clone() } else { args.prob_dir.join(&id) };
        let volume = data(read_volume(&path))?;
        let x = data(normalize(&volume, lo, hi))?;
        let probs = load_probs(&prob_dir)?;
        if probs.spatial_shape() != volume.shape {
            return Err(CliError::Data(format!(
                "{id}: probabilities {:?} do not match volume {:?}",
                probs.spatial_shape(),
                volume.shape
            )));
        }
        let labels = refine_volume(&x, &probs, &params)?;
        prepare_out(&dir)?;
        data(write_labels(&labels, volume.spacing, &dir.join(MASK_NAME)))?;
        log::info!("{id}: {} foreground voxels after refinement", labels.count_foreground());
    }
    Ok(())
}

fn read_mask(path: &Path) -> CliResult<Mask> {
    let (labels, spacing) = data(read_labels(path))?;
    data(Mask::new(labels, spacing))
}

fn score(id: &str, pred: &Mask, reference: &Mask) -> CliResult<SegMetrics> {
    data(evaluate(pred, reference)).map_err(|e| CliError::Data(format!("case `{id}`: {e}")))
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let kv = resolve(&args.common, KvMap::new(), |_| false)?;
    let mut rows: Vec<(String, SegMetrics)> = Vec::new();
    match (&args.pred, &args.manifest) {
        (Some(pred), None) => {
            let reference = args
                .reference
                .as_ref()
                .ok_or_else(|| CliError::Config("--pred needs --reference".into()))?;
            let id = args.case_id.clone().unwrap_or_else(|| {
                pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            let m = score(&id, &read_mask(pred)?, &read_mask(reference)?)?;
            rows.push((id, m));
        }
        (None, Some(manifest)) => {
            let pred_dir = args
                .pred_dir
                .as_ref()
                .ok_or_else(|| CliError::Config("--manifest needs --pred-dir".into()))?;
            for e in data(read_manifest(manifest))? {
                let pred = read_mask(&pred_dir.join(&e.case_id).join(&args.mask_name))?;
                let m = score(&e.case_id, &pred, &read_mask(&e.labels)?)?;
                rows.push((e.case_id, m));
            }
        }
        _ => return Err(CliError::Config("give --pred/--reference or --manifest/--pred-dir".into())),
    }
    let out = &args.common.out;
    prepare_out(out)?;
    write_resolved(out, &kv)?;
    let mut csv = metrics_csv(&rows);
    let all: Vec<SegMetrics> = rows.iter().map(|(_, m)| *m).collect();
    let mean = SegMetrics::mean(&all).expect("at least one case");
    if rows.len() > 1 {
        csv.push_str(&mean.csv_row("mean"));
        csv.push('\n');
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    let mut table = format!("{:<10} {TABLE_HEADER}\n", "case");
    for (id, m) in &rows {
        writeln!(table, "{id:<10} {}", m.table_row()).unwrap();
    }
    if rows.len() > 1 {
        writeln!(table, "{:<10} {}", "mean", mean.table_row()).unwrap();
    }
    print!("{table}");
    Ok(())
}

pub fn sweep(args: SweepArgs) -> CliResult<()> {
    let kv = resolve(&args.common, KvMap::new(), |k| CrfGrid::is_grid_key(k) || is_window_key(k))?;
    let grid = CrfGrid::default().apply_kv(&kv)?;
    let (lo, hi) = window(&kv)?;
    let params = load_params(&args.checkpoint)?;
    let cases = data(read_manifest(&args.manifest))?
        .iter()
        .map(|e| {
            let (volume, labels) = load_case(e)?;
            let intensity = data(normalize(&volume, lo, hi))?;
            let probs = data(forward(&params, &intensity))?;
            Ok(CrfCase {
                intensity,
                probs,
                labels,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let out = &args.common.out;
    prepare_out(out)?;
    let mut resolved = grid.to_kv();
    resolved.merge(&window_kv(lo, hi));
    if let Some(seed) = kv.get("seed") {
        resolved.set("seed", seed);
    }
    write_resolved(out, &resolved)?;
    let mut baseline = 0.0;
    for c in &cases {
        let pred = data(Mask::new(c.probs.argmax_labels(), [1.0; 3]))?;
        let truth = data(Mask::new(c.labels.clone(), [1.0; 3]))?;
        baseline += data(voe(&pred, &truth))?;
    }
    baseline /= cases.len() as f64;
    log::info!("searching {} grid points over {} cases", grid.points()?.len(), cases.len());
    let result = grid_search(&cases, &grid)?;
    write_text(&out.join("sweep.csv"), &result.to_csv())?;
    data(result.best.write(&out.join("best.cfg")))?;
    println!("argmax mean VOE {baseline:.4}");
    println!("best mean VOE {:.4}", result.best_voe);
    print!("{}", result.best.to_kv().to_text());
    Ok(())
}

pub fn dump_kernels(args: DumpArgs) -> CliResult<()> {
    let kv = resolve(&args.common, KvMap::new(), is_window_key)?;
    let (lo, hi) = window(&kv)?;
    let params = load_params(&args.checkpoint)?;
    let weight_name = format!("{}.weight", args.layer);
    let named = params.named_tensors();
    let Some((_, weight)) = named.iter().find(|(n, _)| *n == weight_name) else {
        let layers: Vec<&str> = named
            .iter()
            .filter_map(|(n, _)| n.strip_suffix(".weight"))
            .collect();
        return Err(CliError::Config(format!(
            "unknown layer `{}`; available: {}",
            args.layer,
            layers.join(", ")
        )));
    };
    let conv_index = args
        .layer
        .strip_prefix("conv")
        .and_then(|i| i.parse::<usize>().ok());
    if args.volume.is_some() && conv_index.is_none() {
        return Err(CliError::Config(format!(
            "feature maps are available for mainstream convolutions only, not `{}`",
            args.layer
        )));
    }
    let out = &args.common.out;
    prepare_out(out)?;
    let mut resolved = window_kv(lo, hi);
    resolved.merge(&kv);
    write_resolved(out, &resolved)?;

    // Transposed convolutions store (in, out, ...); report (out, in) like convolutions.
    let transposed = args.layer.contains("deconv");
    let s = weight.shape();
    let mut csv = String::from("out_channel,in_channel,slice,row,col,value\n");
    let w = weight.data();
    for a in 0..s[0] {
        for b in 0..s[1] {
            for z in 0..s[2] {
                for y in 0..s[3] {
                    for x in 0..s[4] {
                        let v = w[(((a * s[1] + b) * s[2] + z) * s[3] + y) * s[4] + x];
                        let (o, i) = if transposed { (b, a) } else { (a, b) };
                        writeln!(csv, "{o},{i},{z},{y},{x},{v}").unwrap();
                    }
                }
            }
        }
    }
    write_text(&out.join("kernels.csv"), &csv)?;

    if let (Some(path), Some(i)) = (&args.volume, conv_index) {
        let volume = data(read_volume(path))?;
        let x = data(normalize(&volume, lo, hi))?;
        let acts = data(conv_activations(&params, &x))?;
        let t = &acts[i - 1];
        let [c, d, h, w] = data(t.dims4())?;
        let mut csv = String::from("channel,slice,row,col,value\n");
        let v = t.data();
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        writeln!(csv, "{ch},{z},{y},{xx},{}", v[((ch * d + z) * h + y) * w + xx]).unwrap();
                    }
                }
            }
        }
        write_text(&out.join("features.csv"), &csv)?;
    }
    Ok(())
}
