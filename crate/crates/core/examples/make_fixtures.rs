//! Regenerate the committed fixtures under `tests/fixtures`.
//!
//! Usage: `cargo run --example make_fixtures [-- <dir>]`

use std::path::PathBuf;

use lazystrike::io::{encode_tensors, write_manifest, write_tensors, ManifestEntry};
use lazystrike::vit::{forward, HeadType, ToyViTConfig, ToyViTParams};
use lazystrike::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
    });
    std::fs::create_dir_all(&dir)?;

    // Container fixtures: one valid file and three corruptions of it.
    let valid = vec![
        ("features".to_string(), Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect())?),
        ("cls".to_string(), Tensor::new(vec![3], vec![1.0, -2.0, 0.25])?),
    ];
    let bytes = encode_tensors(&valid)?;
    std::fs::write(dir.join("valid.lstn"), &bytes)?;
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"NTSL");
    std::fs::write(dir.join("bad_magic.lstn"), bad_magic)?;
    std::fs::write(dir.join("truncated.lstn"), &bytes[..bytes.len() - 5])?;
    let mut unknown_dtype = bytes.clone();
    // First entry: header (10) + name length (2) + "features" (8) puts the dtype at 20.
    unknown_dtype[20] = 7;
    std::fs::write(dir.join("unknown_dtype.lstn"), unknown_dtype)?;

    // Point-in-Box fixture: 2x2 grids of D = 2 features. One cell holds (10, 10),
    // the others (1, 0), (0, 1), (-1, -1); the strong cell has the highest
    // Patch Score under mean or Top-K pooling. Three of four boxes cover it.
    let strong_cells = [0usize, 3, 2, 1];
    let boxes = [[0, 0, 0, 0], [1, 0, 1, 1], [0, 0, 1, 1], [0, 1, 1, 1]];
    let mut tensors = Vec::new();
    let mut entries = Vec::new();
    for (i, (&cell, bbox)) in strong_cells.iter().zip(boxes).enumerate() {
        let mut weak = vec![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]].into_iter();
        let values: Vec<f64> =
            (0..4).flat_map(|c| if c == cell { [10.0, 10.0] } else { weak.next().unwrap() }).collect();
        let id = format!("s{i}");
        tensors.push((id.clone(), Tensor::new(vec![2, 2, 2], values)?));
        entries.push(ManifestEntry {
            id: id.clone(),
            features: format!("pib_features.lstn#{id}"),
            grid_h: 2,
            grid_w: 2,
            bbox,
            label: None,
        });
    }
    write_tensors(dir.join("pib_features.lstn"), &tensors)?;
    write_manifest(dir.join("pib_manifest.jsonl"), &entries)?;

    // Golden logits of a fixed tiny model, one line per head.
    let mut golden = String::new();
    for head in [HeadType::Gap, HeadType::Cls, HeadType::LazyStrike] {
        let cfg = golden_config(head);
        let params = ToyViTParams::init(&cfg)?;
        let image = Tensor::randn(&[8, 8, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(42));
        let out = forward(&image, &params, &cfg)?;
        golden.push_str(&serde_json::to_string(&serde_json::json!({ "head": head, "logits": out.logits }))?);
        golden.push('\n');
    }
    std::fs::write(dir.join("golden_logits.jsonl"), golden)?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}

fn golden_config(head: HeadType) -> ToyViTConfig {
    ToyViTConfig {
        image_size: 8,
        channels: 2,
        patch_size: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        head,
        window_schedule: vec![None, None],
        seed: 7,
        ..Default::default()
    }
}
