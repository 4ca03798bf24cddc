//! On-disk formats: the tensor container, JSON-lines manifests and PPM heatmaps.

mod container;
mod heatmap;
mod manifest;

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

pub use container::{decode_tensors, encode_tensors, read_tensor_map, read_tensors, write_tensors, DTYPE_F64, MAGIC, VERSION};
pub use heatmap::{colormap, encode_ppm, render_heatmap, HEATMAP_SCALE};
pub use manifest::{
    encode_manifest, feature_map_from_tensor, parse_manifest, split_ref, write_manifest, Manifest, ManifestEntry,
};

/// Write `bytes` to a sibling temporary file, fsync it, then rename over `path`.
///
/// Readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| crate::error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x.bin"), b"z").is_err());
    }
}
