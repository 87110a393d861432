//! On-disk formats: the MXT1 little-endian tensor container, the dataset
//! directory layout with its CSV index, model checkpoints (concatenated
//! tensors plus a JSON manifest), and an optional PGM export for eyeballing
//! images.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{init_params, DiscSpec, ModelBundle, Role};
use crate::synth::{DomainDataset, DomainSpec, Subject};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

const MAGIC: &[u8; 4] = b"MXT1";

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format(format!(
            "expected MXT1 magic, got {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(DataError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut f64buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut f64buf)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Tensor::new(shape, data).map_err(|e| DataError::Format(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> io::Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.numel());
    write_tensor_to(&mut buf, t)?;
    fs::write(path, buf)
}

pub fn read_tensor(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path)?;
    read_tensor_from(&mut bytes.as_slice())
}

/// 8-bit binary PGM of a [H, W] or [1, H, W] tensor with values in [0, 1].
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let s = t.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => return Err(DataError::Format(format!("pgm wants [H, W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

// ── dataset layout ───────────────────────────────────────────────────

/// Write one directory per domain with MXT1 image/mask pairs, an index CSV
/// (case_id, domain_id, image_path, mask_path) and the domain specs as JSON.
/// Returns every written path, relative ones resolved against `dir`.
pub fn save_dataset(dir: &Path, data: &[DomainDataset], pgm: bool) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut index = String::from("case_id,domain_id,image_path,mask_path\n");
    for domain in data {
        let sub = dir.join(format!("domain_{}", domain.domain_id));
        fs::create_dir_all(&sub)?;
        for s in &domain.subjects {
            let img_rel = format!("domain_{}/case_{:04}_img.mxt", domain.domain_id, s.case_id);
            let mask_rel = format!("domain_{}/case_{:04}_mask.mxt", domain.domain_id, s.case_id);
            write_tensor(&dir.join(&img_rel), &s.image)?;
            write_tensor(&dir.join(&mask_rel), &s.mask)?;
            written.push(dir.join(&img_rel));
            written.push(dir.join(&mask_rel));
            index.push_str(&format!("{},{},{},{}\n", s.case_id, domain.domain_id, img_rel, mask_rel));
            if pgm {
                let pgm_rel = format!("domain_{}/case_{:04}.pgm", domain.domain_id, s.case_id);
                write_pgm(&dir.join(&pgm_rel), &s.image)?;
                written.push(dir.join(pgm_rel));
            }
        }
    }
    let index_path = dir.join("index.csv");
    fs::write(&index_path, index)?;
    written.push(index_path);
    let specs: Vec<&DomainSpec> = data.iter().map(|d| &d.spec).collect();
    let specs_path = dir.join("domains.json");
    fs::write(&specs_path, serde_json::to_string_pretty(&specs).expect("specs serialize"))?;
    written.push(specs_path);
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DomainDataset>, DataError> {
    let specs: Vec<DomainSpec> = serde_json::from_str(
        &fs::read_to_string(dir.join("domains.json"))
            .map_err(|e| DataError::Format(format!("missing domains.json: {e}")))?,
    )
    .map_err(|e| DataError::Format(format!("bad domains.json: {e}")))?;

    let index = fs::read_to_string(dir.join("index.csv"))
        .map_err(|e| DataError::Format(format!("missing index.csv: {e}")))?;
    let mut datasets: Vec<DomainDataset> = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| DomainDataset { domain_id: i, spec, subjects: Vec::new() })
        .collect();
    for (lineno, line) in index.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(DataError::Format(format!("index.csv line {}: want 4 columns", lineno + 1)));
        }
        let case_id: usize = cols[0]
            .parse()
            .map_err(|_| DataError::Format(format!("index.csv line {}: bad case id", lineno + 1)))?;
        let domain_id: usize = cols[1]
            .parse()
            .map_err(|_| DataError::Format(format!("index.csv line {}: bad domain id", lineno + 1)))?;
        if domain_id >= datasets.len() {
            return Err(DataError::Format(format!("index.csv: domain {domain_id} not in domains.json")));
        }
        let image = read_tensor(&dir.join(cols[2]))?;
        let mask = read_tensor(&dir.join(cols[3]))?;
        datasets[domain_id].subjects.push(Subject { image, mask, domain_id, case_id });
    }
    if datasets.iter().any(|d| d.subjects.is_empty()) {
        return Err(DataError::Format("a domain in domains.json has no subjects".into()));
    }
    Ok(datasets)
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    role: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    in_channels: usize,
    base_channels: usize,
    num_domains: Option<usize>,
    disc_input_hw: Option<(usize, usize)>,
    params: Vec<ParamInfo>,
}

/// Write `<prefix>.bin` (tensors concatenated in manifest order) and
/// `<prefix>.json`.
pub fn save_checkpoint(prefix: &Path, bundle: &ModelBundle) -> Result<(PathBuf, PathBuf), DataError> {
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        in_channels: bundle.in_channels,
        base_channels: bundle.base_channels,
        num_domains: bundle.disc.as_ref().map(|d| d.num_domains),
        disc_input_hw: bundle.disc.as_ref().map(|d| d.input_hw),
        params: bundle
            .params
            .iter()
            .map(|p| ParamInfo {
                name: p.name.clone(),
                role: p.role.as_str().to_string(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let bin_path = prefix.with_extension("bin");
    let json_path = prefix.with_extension("json");
    let mut buf = Vec::new();
    for p in &bundle.params {
        write_tensor_to(&mut buf, &p.tensor)?;
    }
    fs::write(&bin_path, buf)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest).expect("manifest serialize"))?;
    Ok((bin_path, json_path))
}

/// Rebuild a bundle from `<prefix>.json` + `<prefix>.bin`. The wiring comes
/// from the stored hyperparameters; tensor payloads overwrite the fresh
/// initialization after a name/role/shape check.
pub fn load_checkpoint(prefix: &Path) -> Result<ModelBundle, DataError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(prefix.with_extension("json"))?)
            .map_err(|e| DataError::Format(format!("bad checkpoint manifest: {e}")))?;
    let disc = match (manifest.num_domains, manifest.disc_input_hw) {
        (Some(k), Some(hw)) => Some(DiscSpec { num_domains: k, input_hw: hw }),
        _ => None,
    };
    let mut bundle = init_params(0, manifest.in_channels, manifest.base_channels, disc);
    if bundle.params.len() != manifest.params.len() {
        return Err(DataError::Format(format!(
            "checkpoint has {} params, model wants {}",
            manifest.params.len(),
            bundle.params.len()
        )));
    }
    let bytes = fs::read(prefix.with_extension("bin"))?;
    let mut cursor = bytes.as_slice();
    for (param, info) in bundle.params.iter_mut().zip(&manifest.params) {
        if param.name != info.name
            || param.role != Role::parse(&info.role).ok_or_else(|| {
                DataError::Format(format!("unknown role {}", info.role))
            })?
        {
            return Err(DataError::Format(format!(
                "checkpoint param {} ({}) does not match model param {}",
                info.name, info.role, param.name
            )));
        }
        let t = read_tensor_from(&mut cursor)?;
        if t.shape() != info.shape.as_slice() || t.shape() != param.tensor.shape() {
            return Err(DataError::Format(format!("shape mismatch for param {}", info.name)));
        }
        param.tensor = t;
    }
    if !cursor.is_empty() {
        return Err(DataError::Format("trailing bytes in checkpoint payload".into()));
    }
    Ok(bundle)
}

/// Accept `ckpt`, `ckpt.bin` or `ckpt.json` and return the bare prefix.
pub fn checkpoint_prefix(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::build_benchmark;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mixdann-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn tensor_round_trip_bitwise() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300, 0.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MXT1");
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tensor_rejects_bad_magic() {
        let bytes = b"NOPE\x00\x00\x00\x00";
        assert!(read_tensor_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tmpdir("dataset");
        let data = build_benchmark(3, 3, 4, 32, 32).unwrap();
        let files = save_dataset(&dir, &data, true).unwrap();
        assert!(files.iter().any(|f| f.extension().unwrap() == "pgm"));
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.spec.name, b.spec.name);
            assert_eq!(a.subjects.len(), b.subjects.len());
            for (sa, sb) in a.subjects.iter().zip(&b.subjects) {
                assert_eq!(sa.case_id, sb.case_id);
                assert_eq!(sa.image.data(), sb.image.data());
                assert_eq!(sa.mask.data(), sb.mask.data());
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        use crate::models::DiscSpec;
        let dir = tmpdir("ckpt");
        let bundle = init_params(11, 1, 4, Some(DiscSpec { num_domains: 2, input_hw: (8, 8) }));
        let prefix = dir.join("model");
        save_checkpoint(&prefix, &bundle).unwrap();
        let back = load_checkpoint(&prefix).unwrap();
        assert_eq!(back.params.len(), bundle.params.len());
        for (a, b) in bundle.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.role, b.role);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(back.disc.as_ref().unwrap().num_domains, 2);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_prefix_normalization() {
        assert_eq!(checkpoint_prefix(Path::new("a/b.bin")), Path::new("a/b"));
        assert_eq!(checkpoint_prefix(Path::new("a/b.json")), Path::new("a/b"));
        assert_eq!(checkpoint_prefix(Path::new("a/b")), Path::new("a/b"));
    }
}
