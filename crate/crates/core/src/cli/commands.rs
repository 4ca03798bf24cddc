use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::args::*;
use super::{emit, usage, CliResult, DigestBuilder};
use crate::exec::Execution;
use crate::io::{
    feature_map_from_tensor, read_tensor_map, read_tensors, render_heatmap, split_ref, write_atomic, write_manifest,
    write_tensors, Manifest, ManifestEntry,
};
use crate::lazystrike::{lazystrike_pool, lazystrike_pool_batch, FeatureMap, LazyStrikeParams, PooledToken};
use crate::metrics::{
    argmax, corloc, foreground_mask, mask_image_patches, mask_to_box, norm_stats, patch_score, pca_project,
    point_in_box, MaskMode, PatchBox, ScoreKind, ScoreMap,
};
use crate::tensor::Tensor;
use crate::vit::{
    forward, gen_synthetic, parse_window_schedule, train_from, SynthConfig, SyntheticSample, ToyViTConfig,
    ToyViTParams, TrainOptions,
};

/// Everything `train` needs, as stored in a model directory's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ToyViTConfig,
    pub train: TrainOptions,
    /// Used only when no manifest is given; geometry follows `model`.
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ToyViTConfig::default(),
            train: TrainOptions::default(),
            synth: SynthConfig::default(),
            n_train: 1000,
            n_heldout: 200,
        }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.lstn";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";

pub(super) fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Train(a) => train_cmd(a, out, err),
        Command::Pool(a) => pool_cmd(a, out),
        Command::Score(a) => score_cmd(a, out),
        Command::Pib(a) => pib_cmd(a, out),
        Command::Probe(a) => probe_cmd(a, out),
        Command::Discover(a) => discover_cmd(a, out),
        Command::Pca(a) => pca_cmd(a, out),
        Command::Synth(a) => synth_cmd(a, out),
    }
}

fn header(out: &mut dyn Write, command: &str, digest: &DigestBuilder) -> CliResult<()> {
    emit(out, &json!({ "command": command, "config_digest": digest.finish(command) }))
}

fn parse_grid(grid: &Option<String>) -> CliResult<Option<(usize, usize)>> {
    let Some(g) = grid else { return Ok(None) };
    let parsed = g
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
        .filter(|&(h, w): &(usize, usize)| h > 0 && w > 0);
    parsed.map(Some).ok_or_else(|| usage(format!("grid must look like 8x8, got {g:?}")))
}

fn pooling_params(p: &PoolingArgs) -> CliResult<LazyStrikeParams> {
    if p.k == Some(0) {
        return Err(usage("--k must be at least 1"));
    }
    if let Some(s) = p.sigma {
        if !(s > 0.0) {
            return Err(usage("--sigma must be positive"));
        }
    }
    if !(p.epsilon > 0.0) || !p.epsilon.is_finite() {
        return Err(usage("--epsilon must be positive and finite"));
    }
    Ok(LazyStrikeParams { k: p.k, sigma: p.sigma, epsilon: p.epsilon })
}

/// Check K against a concrete patch count.
fn check_k(params: &LazyStrikeParams, n: usize) -> CliResult<()> {
    match params.k {
        Some(k) if k > n => Err(usage(format!("--k {k} exceeds the {n} patches"))),
        _ => Ok(()),
    }
}

/// Named feature maps from `file` or `file#tensor`; all tensors in file order without a name.
fn load_features(reference: &Path, grid: Option<(usize, usize)>, digest: &mut DigestBuilder) -> CliResult<Vec<(String, FeatureMap)>> {
    let text = reference.to_string_lossy();
    let (file, name) = split_ref(&text);
    let file = PathBuf::from(file);
    digest.input("features", &file)?.param("tensor", name)?.param("grid", grid)?;
    let tensors = read_tensors(&file)?;
    let picked: Vec<(String, Tensor)> = match name {
        Some(n) => {
            let t = tensors
                .into_iter()
                .find(|(k, _)| k == n)
                .ok_or_else(|| crate::Error::MissingTensor(n.to_string()))?;
            vec![t]
        }
        None => tensors,
    };
    if picked.is_empty() {
        return Err(usage(format!("{} holds no tensors", file.display())));
    }
    picked.into_iter().map(|(n, t)| Ok((n, feature_map_from_tensor(&t, grid)?))).collect()
}

fn single_map(reference: &Path, grid: Option<(usize, usize)>, digest: &mut DigestBuilder) -> CliResult<(String, FeatureMap)> {
    let mut maps = load_features(reference, grid, digest)?;
    if maps.len() != 1 {
        return Err(usage(format!("{} holds {} tensors; pick one with file#name", reference.display(), maps.len())));
    }
    Ok(maps.remove(0))
}

/// Per-patch scores of a feature map under the chosen global token.
fn score_features(
    map: &FeatureMap,
    cls: Option<&[f64]>,
    pool: PoolKind,
    kind: ScoreChoice,
    params: &LazyStrikeParams,
) -> crate::Result<ScoreMap> {
    match kind {
        ScoreChoice::Norm => ScoreMap::new(map.grid_h(), map.grid_w(), norm_stats(map).norms, ScoreKind::Norm),
        ScoreChoice::Votes => {
            let tok = lazystrike_pool(map, params)?;
            ScoreMap::from_votes(map.grid_h(), map.grid_w(), &tok.votes)
        }
        ScoreChoice::Patch => match (cls, pool) {
            (Some(c), _) => patch_score(map, c),
            (None, PoolKind::Gap) => patch_score(map, &map.mean_pool()),
            (None, PoolKind::Lazystrike) => patch_score(map, &lazystrike_pool(map, params)?.cls),
        },
    }
}

fn check_score_choice(kind: ScoreChoice, pool: PoolKind) -> CliResult<()> {
    if kind == ScoreChoice::Votes && pool == PoolKind::Gap {
        return Err(usage("vote counts need --pool lazystrike"));
    }
    Ok(())
}

fn f64_tensor(shape: Vec<usize>, data: Vec<f64>) -> crate::Result<Tensor> {
    Tensor::new(shape, data)
}

fn pool_cmd(a: PoolArgs, out: &mut dyn Write) -> CliResult<()> {
    let params = pooling_params(&a.pooling)?;
    let mut digest = DigestBuilder::default();
    let grid = parse_grid(&a.input.grid)?;
    let maps = load_features(&a.input.features, grid, &mut digest)?;
    digest.param("gap", a.gap)?.param("pooling", params)?;
    for (_, m) in &maps {
        check_k(&params, m.n_patches())?;
    }
    let exec = Execution::default();
    let tokens: Vec<PooledToken> = if a.gap {
        maps.iter()
            .map(|(_, m)| PooledToken {
                cls: m.mean_pool(),
                selected: vec![(0..m.n_patches()).collect(); m.dim()],
                votes: vec![m.dim() as u32; m.n_patches()],
            })
            .collect()
    } else {
        let only: Vec<FeatureMap> = maps.iter().map(|(_, m)| m.clone()).collect();
        lazystrike_pool_batch(&only, &params, exec)?
    };
    let mut container = Vec::new();
    for ((name, m), tok) in maps.iter().zip(&tokens) {
        let k = tok.k();
        container.push((format!("{name}.cls"), f64_tensor(vec![m.dim()], tok.cls.clone())?));
        container.push((format!("{name}.votes"), f64_tensor(vec![m.grid_h(), m.grid_w()], tok.votes.iter().map(|&v| v as f64).collect())?));
        container.push((format!("{name}.selected"), f64_tensor(vec![m.dim(), k], tok.selected.iter().flatten().map(|&i| i as f64).collect())?));
    }
    if let Some(path) = &a.out {
        write_tensors(path, &container)?;
    }
    header(out, "pool", &digest)?;
    for ((name, _), tok) in maps.iter().zip(&tokens) {
        emit(out, &json!({ "name": name, "k": tok.k(), "cls": tok.cls, "votes": tok.votes }))?;
    }
    Ok(())
}

fn score_cmd(a: ScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    let params = pooling_params(&a.pooling)?;
    if a.cls.is_none() {
        check_score_choice(a.kind, a.pool)?;
    }
    let mut digest = DigestBuilder::default();
    let (name, map) = single_map(&a.input.features, parse_grid(&a.input.grid)?, &mut digest)?;
    check_k(&params, map.n_patches())?;
    let cls = match &a.cls {
        Some(reference) => {
            let text = reference.to_string_lossy();
            let (file, tensor) = split_ref(&text);
            digest.input("cls", Path::new(file))?.param("cls_tensor", tensor)?;
            let tensors = read_tensors(file)?;
            let t = match tensor {
                Some(n) => tensors.into_iter().find(|(k, _)| k == n).map(|(_, t)| t),
                None if tensors.len() == 1 => tensors.into_iter().next().map(|(_, t)| t),
                None => return Err(usage("the --cls file holds several tensors; pick one with file#name")),
            }
            .ok_or_else(|| crate::Error::MissingTensor(text.to_string()))?;
            Some(t.into_data())
        }
        None => None,
    };
    digest.param("pool", a.pool)?.param("kind", a.kind)?.param("pooling", params)?;
    let score = score_features(&map, cls.as_deref(), a.pool, a.kind, &params)?;
    if let Some(path) = &a.out {
        write_tensors(path, &[("score".to_string(), score.to_tensor())])?;
    }
    if let Some(path) = &a.heatmap {
        render_heatmap(&score, path)?;
    }
    header(out, "score", &digest)?;
    emit(
        out,
        &json!({
            "name": name,
            "kind": score.kind(),
            "grid_h": score.grid_h(),
            "grid_w": score.grid_w(),
            "argmax": argmax(&score),
            "scores": score.values(),
        }),
    )
}

/// Model configuration and parameters from a `train` output directory.
pub fn load_model(dir: &Path) -> crate::Result<(RunConfig, ToyViTParams)> {
    let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let params = ToyViTParams::from_named(&cfg.model, read_tensor_map(dir.join(CHECKPOINT_FILE))?)?;
    Ok((cfg, params))
}

fn digest_model(digest: &mut DigestBuilder, dir: &Path) -> CliResult<()> {
    digest.input("model.config", &dir.join(CONFIG_FILE))?.input("model.checkpoint", &dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn digest_manifest(digest: &mut DigestBuilder, key: &str, path: &Path, m: &Manifest) -> CliResult<()> {
    digest.input(key, path)?;
    for (i, f) in m.referenced_files().iter().enumerate() {
        digest.input(&format!("{key}.file{i}"), f)?;
    }
    Ok(())
}

/// Patch Score map of an image under a trained model: cosine to its global token.
fn model_score(image: &Tensor, model: &ToyViTConfig, params: &ToyViTParams, kind: ScoreChoice) -> crate::Result<(ScoreMap, Vec<f64>)> {
    let f = forward(image, params, model)?;
    let score = match kind {
        ScoreChoice::Patch => patch_score(&f.features, &f.global)?,
        ScoreChoice::Norm => ScoreMap::new(f.features.grid_h(), f.features.grid_w(), norm_stats(&f.features).norms, ScoreKind::Norm)?,
        ScoreChoice::Votes => {
            let votes = match &f.pooled {
                Some(p) => p.votes.clone(),
                None => lazystrike_pool(&f.features, &model.lazystrike)?.votes,
            };
            ScoreMap::from_votes(f.features.grid_h(), f.features.grid_w(), &votes)?
        }
    };
    Ok((score, f.logits))
}

fn pib_cmd(a: PibArgs, out: &mut dyn Write) -> CliResult<()> {
    let params = pooling_params(&a.pooling)?;
    let mut digest = DigestBuilder::default();
    let mut manifest = Manifest::read(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(usage("the manifest has no entries"));
    }
    digest_manifest(&mut digest, "manifest", &a.manifest, &manifest)?;
    digest.param("kind", a.kind)?;
    let exec = Execution::default();
    let boxes: Vec<PatchBox> = manifest.entries.iter().map(|e| e.fg_box()).collect::<crate::Result<_>>()?;
    let hits: Vec<bool> = match &a.checkpoint {
        Some(dir) => {
            digest_model(&mut digest, dir)?;
            let (cfg, model) = load_model(dir)?;
            let images: Vec<Tensor> = (0..manifest.entries.len()).map(|i| manifest.tensor(i)).collect::<crate::Result<_>>()?;
            let idx: Vec<usize> = (0..images.len()).collect();
            exec.map(&idx, |&i| point_in_box(&model_score(&images[i], &cfg.model, &model, a.kind)?.0, &boxes[i]))
                .into_iter()
                .collect::<crate::Result<_>>()?
        }
        None => {
            check_score_choice(a.kind, a.pool)?;
            digest.param("pool", a.pool)?.param("pooling", params)?;
            let samples = manifest.annotated_features()?;
            for s in &samples {
                check_k(&params, s.input.n_patches())?;
            }
            exec.map(&samples, |s| point_in_box(&score_features(&s.input, None, a.pool, a.kind, &params)?, &s.fg_box))
                .into_iter()
                .collect::<crate::Result<_>>()?
        }
    };
    header(out, "pib", &digest)?;
    if a.per_sample {
        for (e, h) in manifest.entries.iter().zip(&hits) {
            emit(out, &json!({ "id": e.id, "hit": h }))?;
        }
    }
    let n_hits = hits.iter().filter(|&&h| h).count();
    let pib = 100.0 * n_hits as f64 / hits.len() as f64;
    emit(out, &json!({ "samples": hits.len(), "hits": n_hits, "pib": pib }))
}

fn probe_cmd(a: ProbeArgs, out: &mut dyn Write) -> CliResult<()> {
    let modes: Vec<MaskMode> = if a.mode.is_empty() {
        vec![MaskMode::Top, MaskMode::Bottom]
    } else {
        a.mode.iter().map(|m| m.parse()).collect::<crate::Result<_>>()?
    };
    if a.fraction.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(usage("--fraction values must lie in [0, 1]"));
    }
    let mut digest = DigestBuilder::default();
    digest_model(&mut digest, &a.checkpoint)?;
    let mut manifest = Manifest::read(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(usage("the manifest has no entries"));
    }
    digest_manifest(&mut digest, "manifest", &a.manifest, &manifest)?;
    digest.param("modes", &modes)?.param("fractions", &a.fraction)?;
    let (cfg, model) = load_model(&a.checkpoint)?;
    let cfg = cfg.model;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for i in 0..manifest.entries.len() {
        let e = &manifest.entries[i];
        let label = e.label.ok_or_else(|| crate::Error::Manifest { line: i + 1, msg: format!("{} has no label", e.id) })?;
        samples.push((manifest.tensor(i)?, label));
    }
    let exec = Execution::default();
    let base: Vec<(ScoreMap, Vec<f64>)> = exec
        .map(&samples, |(img, _)| model_score(img, &cfg, &model, ScoreChoice::Patch))
        .into_iter()
        .collect::<crate::Result<_>>()?;
    let n = samples.len();
    let accuracy = |logits: &[Vec<f64>]| {
        logits.iter().zip(&samples).filter(|(l, (_, y))| crate::metrics::argmax_slice(l) == *y).count() as f64 / n as f64
    };
    let classes = cfg.num_classes;
    let base_logits: Vec<Vec<f64>> = base.iter().map(|b| b.1.clone()).collect();
    let base_top1 = accuracy(&base_logits);
    let mut container = vec![("baseline".to_string(), f64_tensor(vec![n, classes], base_logits.concat())?)];
    let mut reports = Vec::new();
    for &mode in &modes {
        for &fraction in &a.fraction {
            let idx: Vec<usize> = (0..n).collect();
            let logits: Vec<Vec<f64>> = exec
                .map(&idx, |&i| {
                    let masked = mask_image_patches(&samples[i].0, cfg.patch_size, &base[i].0, mode, fraction)?;
                    Ok(forward(&masked, &model, &cfg)?.logits)
                })
                .into_iter()
                .collect::<crate::Result<_>>()?;
            let top1 = accuracy(&logits);
            let mode_name = serde_json::to_value(mode)?;
            let mode_name = mode_name.as_str().unwrap_or_default().to_string();
            container.push((format!("{mode_name}@{fraction}"), f64_tensor(vec![n, classes], logits.concat())?));
            reports.push(json!({
                "mode": mode_name,
                "fraction": fraction,
                "masked_patches": (fraction * cfg.n_patches() as f64).floor() as usize,
                "baseline_top1": base_top1,
                "top1": top1,
                "drop": base_top1 - top1,
            }));
        }
    }
    if let Some(path) = &a.out {
        write_tensors(path, &container)?;
    }
    header(out, "probe", &digest)?;
    for r in &reports {
        emit(out, r)?;
    }
    Ok(())
}

fn discover_cmd(a: DiscoverArgs, out: &mut dyn Write) -> CliResult<()> {
    let params = pooling_params(&a.pooling)?;
    check_score_choice(a.kind, a.pool)?;
    let mut digest = DigestBuilder::default();
    digest.param("pool", a.pool)?.param("kind", a.kind)?.param("pooling", params)?;
    let (named, truth): (Vec<(String, FeatureMap)>, Option<Vec<PatchBox>>) = match (&a.features, &a.manifest) {
        (Some(f), _) => (load_features(f, parse_grid(&a.grid)?, &mut digest)?, None),
        (None, Some(m)) => {
            let mut manifest = Manifest::read(m)?;
            digest_manifest(&mut digest, "manifest", m, &manifest)?;
            let samples = manifest.annotated_features()?;
            let boxes = samples.iter().map(|s| s.fg_box).collect();
            (samples.into_iter().map(|s| (s.id, s.input)).collect(), Some(boxes))
        }
        (None, None) => return Err(usage("give --features or --manifest")),
    };
    for (_, m) in &named {
        check_k(&params, m.n_patches())?;
    }
    let found: Vec<(Vec<bool>, Option<PatchBox>)> = Execution::default()
        .map(&named, |(_, m)| {
            let score = score_features(m, None, a.pool, a.kind, &params)?;
            let mask = foreground_mask(&score);
            let b = mask_to_box(&mask, m.grid_h(), m.grid_w())?;
            Ok((mask, b))
        })
        .into_iter()
        .collect::<crate::Result<_>>()?;
    let corloc_value = match &truth {
        Some(gt) => {
            let predicted: Vec<Option<PatchBox>> = found.iter().map(|f| f.1).collect();
            Some(100.0 * corloc(&predicted, gt)?)
        }
        None => None,
    };
    header(out, "discover", &digest)?;
    for ((name, _), (mask, b)) in named.iter().zip(&found) {
        emit(
            out,
            &json!({
                "id": name,
                "box": b.map(|b| b.to_array()),
                "mask": mask.iter().map(|&m| m as u8).collect::<Vec<_>>(),
            }),
        )?;
    }
    if let Some(c) = corloc_value {
        emit(out, &json!({ "samples": named.len(), "corloc": c }))?;
    }
    Ok(())
}

fn pca_cmd(a: PcaArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut digest = DigestBuilder::default();
    let (name, map) = single_map(&a.input.features, parse_grid(&a.input.grid)?, &mut digest)?;
    digest.param("components", a.components)?;
    if a.components == 0 || a.components > map.n_patches() {
        return Err(usage(format!("--components must be in 1..={}", map.n_patches())));
    }
    let p = pca_project(&map, a.components)?;
    let k = p.n_components;
    let maps: Vec<ScoreMap> = (0..k)
        .map(|c| ScoreMap::new(map.grid_h(), map.grid_w(), p.component_scores(c), ScoreKind::Component))
        .collect::<crate::Result<_>>()?;
    if let Some(path) = &a.out {
        write_tensors(
            path,
            &[
                ("scores".to_string(), f64_tensor(vec![map.n_patches(), k], p.scores.clone())?),
                ("components".to_string(), f64_tensor(vec![k, map.dim()], p.components.clone())?),
                ("explained_variance".to_string(), f64_tensor(vec![k], p.explained_variance.clone())?),
                ("mean".to_string(), f64_tensor(vec![map.dim()], p.mean.clone())?),
            ],
        )?;
    }
    if let Some(dir) = &a.heatmap_dir {
        std::fs::create_dir_all(dir)?;
        for (c, m) in maps.iter().enumerate() {
            render_heatmap(m, dir.join(format!("pc{c}.ppm")))?;
        }
    }
    header(out, "pca", &digest)?;
    emit(
        out,
        &json!({
            "name": name,
            "explained_variance": p.explained_variance,
            "explained_ratio": p.explained_ratio,
            "argmax": maps.iter().map(argmax).collect::<Vec<_>>(),
        }),
    )
}

fn synth_cmd(a: SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    let fields = [
        (&mut cfg.grid, a.grid),
        (&mut cfg.patch_size, a.patch_size),
        (&mut cfg.channels, a.channels),
        (&mut cfg.classes, a.classes),
        (&mut cfg.fg_min, a.fg_min),
        (&mut cfg.fg_max, a.fg_max),
    ];
    for (slot, v) in fields {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(v) = a.noise {
        cfg.noise_level = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mut digest = DigestBuilder::default();
    digest.param("synth", &cfg)?.param("n", a.n)?;
    let data = gen_synthetic(a.n, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let tensors: Vec<(String, Tensor)> = data.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
    let entries: Vec<ManifestEntry> = data
        .iter()
        .map(|s| ManifestEntry {
            id: s.id.clone(),
            features: format!("images.lstn#{}", s.id),
            grid_h: cfg.grid,
            grid_w: cfg.grid,
            bbox: s.fg_box.to_array(),
            label: Some(s.label),
        })
        .collect();
    write_tensors(a.out.join("images.lstn"), &tensors)?;
    write_manifest(a.out.join("manifest.jsonl"), &entries)?;
    header(out, "synth", &digest)?;
    emit(out, &json!({ "samples": a.n, "image_size": cfg.image_size(), "classes": cfg.classes }))
}

/// Labelled images from a manifest, checked against the model geometry.
fn manifest_images(path: &Path, model: &ToyViTConfig) -> CliResult<(Manifest, Vec<SyntheticSample>)> {
    let mut m = Manifest::read(path)?;
    let mut out = Vec::with_capacity(m.entries.len());
    for i in 0..m.entries.len() {
        let image = m.tensor(i)?;
        let e = &m.entries[i];
        let label = e.label.ok_or_else(|| crate::Error::Manifest { line: i + 1, msg: format!("{} has no label", e.id) })?;
        if (e.grid_h, e.grid_w) != (model.grid_side(), model.grid_side()) {
            return Err(crate::Error::Manifest {
                line: i + 1,
                msg: format!("grid {}x{} differs from the model's {}", e.grid_h, e.grid_w, model.grid_side()),
            }
            .into());
        }
        out.push(SyntheticSample { id: e.id.clone(), image, label, fg_box: e.fg_box()? });
    }
    Ok((m, out))
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let mut run: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        run.model.seed = s;
        run.train.seed = s;
        run.synth.seed = s;
    }
    if let Some(v) = a.epochs {
        run.train.epochs = v;
    }
    if let Some(v) = a.lr {
        run.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        run.train.batch_size = v;
    }
    if let Some(h) = &a.head {
        run.model.head = h.parse()?;
    }
    if let Some(k) = a.pooling.k {
        run.model.lazystrike.k = Some(k);
    }
    if let Some(s) = a.pooling.sigma {
        run.model.lazystrike.sigma = Some(s);
    }
    if let Some(e) = a.pooling.epsilon {
        run.model.lazystrike.epsilon = e;
    }
    if let Some(w) = &a.window_schedule {
        run.model.window_schedule = parse_window_schedule(w, run.model.depth).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(n) = a.n_train {
        run.n_train = n;
    }
    if let Some(n) = a.n_heldout {
        run.n_heldout = n;
    }
    // Synthetic geometry always follows the model.
    run.synth.grid = run.model.grid_side();
    run.synth.patch_size = run.model.patch_size;
    run.synth.channels = run.model.channels;
    run.synth.classes = run.model.num_classes;
    run.model.validate().map_err(|e| usage(e.to_string()))?;

    let mut digest = DigestBuilder::default();
    let (train_set, heldout) = match &a.data {
        Some(path) => {
            let (m, train_set) = manifest_images(path, &run.model)?;
            digest_manifest(&mut digest, "data", path, &m)?;
            let heldout = match &a.heldout {
                Some(h) => {
                    let (hm, hs) = manifest_images(h, &run.model)?;
                    digest_manifest(&mut digest, "heldout", h, &hm)?;
                    hs
                }
                None => Vec::new(),
            };
            digest.param("run", &run.model)?.param("train", &run.train)?;
            (train_set, heldout)
        }
        None => {
            if run.n_train == 0 {
                return Err(usage("--n-train must be positive"));
            }
            run.synth.validate().map_err(|e| usage(e.to_string()))?;
            digest.param("run", &run)?;
            let mut all = gen_synthetic(run.n_train + run.n_heldout, &run.synth)?;
            let heldout = all.split_off(run.n_train);
            (all, heldout)
        }
    };
    header(out, "train", &digest)?;
    let params = ToyViTParams::init(&run.model)?;
    let _ = writeln!(err, "training {} parameters on {} samples", params.num_parameters(), train_set.len());
    let mut lines = Vec::new();
    let result = train_from(params, &run.model, &train_set, &heldout, &run.train, Execution::default(), |e| {
        lines.push(serde_json::to_string(e).expect("epoch log serialises"));
    })?;
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    std::fs::create_dir_all(&a.out)?;
    let named: Vec<(String, Tensor)> = result.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    write_tensors(a.out.join(CHECKPOINT_FILE), &named)?;
    write_atomic(&a.out.join(CONFIG_FILE), (serde_json::to_string_pretty(&run)? + "\n").as_bytes())?;
    let mut log_text = lines.join("\n");
    if !log_text.is_empty() {
        log_text.push('\n');
    }
    write_atomic(&a.out.join(LOG_FILE), log_text.as_bytes())?;
    let last = result.log.last();
    emit(out, &json!({ "epochs": result.log.len(), "final_top1": last.map(|e| e.top1), "final_pib": last.map(|e| e.pib) }))
}
