//! On-disk formats: flat binary arrays, dataset directories, named-array
//! checkpoint archives, line-delimited metrics, and PNG export.
//!
//! Datasets store pixels as little-endian f32 (compact, and precision beyond
//! that is meaningless for renders). Checkpoints store f64 so a resumed run
//! is bit-identical to an uninterrupted one.

use crate::error::{Error, Result};
use crate::nets::WeightSet;
use crate::toymm::{DataConfig, DatasetBundle, MorphParams, SynthItem};
use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_VERSION: &str = "ds-1";
pub const CHECKPOINT_VERSION: &str = "ck-1";

const ARRAY_MAGIC_F32: &[u8; 4] = b"FA4\n";
const ARRAY_MAGIC_F64: &[u8; 4] = b"FA8\n";

fn corrupt(what: &str) -> Error {
    Error::Corrupt(what.to_string())
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], shape: &[usize]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated array header"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Vec<usize>> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| corrupt("missing array magic"))?;
    if &m != magic {
        return Err(corrupt("bad array magic"));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(corrupt("implausible array rank"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    Ok(shape)
}

/// Write an array as little-endian f32 with a shape header.
pub fn write_array_f32(path: &Path, arr: &ArrayD<f64>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, ARRAY_MAGIC_F32, arr.shape())?;
    for &v in arr.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array_f32(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let shape = read_header(&mut r, ARRAY_MAGIC_F32)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(|_| corrupt("truncated array payload"))?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| corrupt("array shape mismatch"))
}

fn write_f64_payload<W: Write>(w: &mut W, arr: &ArrayD<f64>) -> Result<()> {
    write_header(w, ARRAY_MAGIC_F64, arr.shape())?;
    for &v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64_payload<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let shape = read_header(r, ARRAY_MAGIC_F64)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(|_| corrupt("truncated array payload"))?;
        data.push(f64::from_le_bytes(b));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| corrupt("array shape mismatch"))
}

/// Write a sequence of named f64 arrays to one archive file.
pub fn write_named_f64(path: &Path, entries: &[(String, ArrayD<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, arr) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_f64_payload(&mut w, arr)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_named_f64(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(corrupt("implausible entry name length"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| corrupt("truncated entry name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("entry name not utf-8"))?;
        out.push((name, read_f64_payload(&mut r)?));
    }
    // trailing garbage means the file is not what we wrote
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(corrupt("trailing bytes after last archive entry"));
    }
    Ok(out)
}

/// Serializable form of a weight set: names in order plus one archive slot each.
pub fn weight_set_entries(prefix: &str, ws: &WeightSet) -> Vec<(String, ArrayD<f64>)> {
    ws.entries().iter().map(|(n, a)| (format!("{prefix}/{n}"), a.clone())).collect()
}

/// Rebuild a weight set from archive entries carrying the given prefix,
/// ordered as written.
pub fn weight_set_from_entries(
    prefix: &str,
    entries: &[(String, ArrayD<f64>)],
) -> Result<WeightSet> {
    let want = format!("{prefix}/");
    let collected: Vec<(String, ArrayD<f64>)> = entries
        .iter()
        .filter(|(n, _)| n.starts_with(&want))
        .map(|(n, a)| (n[want.len()..].to_string(), a.clone()))
        .collect();
    if collected.is_empty() {
        return Err(corrupt(&format!("archive holds no entries for '{prefix}'")));
    }
    WeightSet::new(collected)
}

/// Append one record to a line-delimited JSON file.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record)?;
    f.write_all(line.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Save a [C,H,W] image in [0,1] as an 8-bit PNG (grayscale or RGB).
pub fn save_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([quant(img[[0, y, x]])]));
                }
            }
            buf.save(path).map_err(|e| Error::Data(format!("png write failed: {e}")))
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [quant(img[[0, y, x]]), quant(img[[1, y, x]]), quant(img[[2, y, x]])];
                    buf.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            buf.save(path).map_err(|e| Error::Data(format!("png write failed: {e}")))
        }
        _ => Err(Error::InvalidArgument(format!("cannot write {c}-channel image as PNG"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    version: String,
    config: DataConfig,
    synthetic_params: Vec<MorphParams>,
    real_labels: Vec<u32>,
    paired_count: usize,
    heldout_params: Vec<MorphParams>,
}

fn stack_images(images: &[&Array3<f64>]) -> Result<ArrayD<f64>> {
    if images.is_empty() {
        let shape = IxDyn(&[0, 0, 0, 0]);
        return Ok(ArrayD::zeros(shape));
    }
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views)
        .map(|a| a.into_dyn())
        .map_err(|_| Error::Structure("images in a dataset must share one shape".into()))
}

fn unstack_images(arr: &ArrayD<f64>) -> Result<Vec<Array3<f64>>> {
    let shape = arr.shape();
    if shape.len() != 4 {
        return Err(corrupt("image stack must be rank 4"));
    }
    let mut out = Vec::with_capacity(shape[0]);
    for i in 0..shape[0] {
        let img: Array3<f64> = arr
            .index_axis(Axis(0), i)
            .to_owned()
            .into_dimensionality()
            .map_err(|_| corrupt("image slice rank"))?;
        out.push(img);
    }
    Ok(out)
}

/// Persist a dataset bundle as a directory: a JSON manifest plus flat f32
/// binary image stacks. Overwrites any previous content at the same paths.
pub fn save_datasets(dir: &Path, cfg: &DataConfig, bundle: &DatasetBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION.to_string(),
        config: cfg.clone(),
        synthetic_params: bundle.unpaired_synthetic.iter().map(|s| s.params.clone()).collect(),
        real_labels: bundle.unpaired_real.iter().map(|(l, _)| *l).collect(),
        paired_count: bundle.paired.len(),
        heldout_params: bundle.heldout.iter().map(|(p, _, _)| p.clone()).collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let synth: Vec<&Array3<f64>> = bundle.unpaired_synthetic.iter().map(|s| &s.image).collect();
    write_array_f32(&dir.join("synthetic.bin"), &stack_images(&synth)?)?;
    let real: Vec<&Array3<f64>> = bundle.unpaired_real.iter().map(|(_, i)| i).collect();
    write_array_f32(&dir.join("real.bin"), &stack_images(&real)?)?;
    let ps: Vec<&Array3<f64>> = bundle.paired.iter().map(|(s, _)| s).collect();
    let pr: Vec<&Array3<f64>> = bundle.paired.iter().map(|(_, r)| r).collect();
    write_array_f32(&dir.join("paired_synthetic.bin"), &stack_images(&ps)?)?;
    write_array_f32(&dir.join("paired_real.bin"), &stack_images(&pr)?)?;
    let hs: Vec<&Array3<f64>> = bundle.heldout.iter().map(|(_, s, _)| s).collect();
    let hr: Vec<&Array3<f64>> = bundle.heldout.iter().map(|(_, _, r)| r).collect();
    write_array_f32(&dir.join("heldout_synthetic.bin"), &stack_images(&hs)?)?;
    write_array_f32(&dir.join("heldout_real.bin"), &stack_images(&hr)?)?;
    Ok(())
}

pub fn load_datasets(dir: &Path) -> Result<(DataConfig, DatasetBundle)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Incompatible {
            expected: DATASET_VERSION.to_string(),
            found: manifest.version,
        });
    }
    let synth = unstack_images(&read_array_f32(&dir.join("synthetic.bin"))?)?;
    if synth.len() != manifest.synthetic_params.len() {
        return Err(corrupt("synthetic image count disagrees with manifest"));
    }
    let unpaired_synthetic: Vec<SynthItem> = manifest
        .synthetic_params
        .iter()
        .zip(synth)
        .map(|(p, image)| SynthItem { params: p.clone(), image })
        .collect();
    let real = unstack_images(&read_array_f32(&dir.join("real.bin"))?)?;
    if real.len() != manifest.real_labels.len() {
        return Err(corrupt("real image count disagrees with manifest"));
    }
    let unpaired_real = manifest.real_labels.iter().copied().zip(real).collect();
    let ps = unstack_images(&read_array_f32(&dir.join("paired_synthetic.bin"))?)?;
    let pr = unstack_images(&read_array_f32(&dir.join("paired_real.bin"))?)?;
    if ps.len() != manifest.paired_count || pr.len() != manifest.paired_count {
        return Err(corrupt("paired image count disagrees with manifest"));
    }
    let paired = ps.into_iter().zip(pr).collect();
    let hs = unstack_images(&read_array_f32(&dir.join("heldout_synthetic.bin"))?)?;
    let hr = unstack_images(&read_array_f32(&dir.join("heldout_real.bin"))?)?;
    if hs.len() != manifest.heldout_params.len() || hr.len() != manifest.heldout_params.len() {
        return Err(corrupt("held-out image count disagrees with manifest"));
    }
    let heldout = manifest
        .heldout_params
        .iter()
        .cloned()
        .zip(hs.into_iter().zip(hr))
        .map(|(p, (s, r))| (p, s, r))
        .collect();
    Ok((
        manifest.config,
        DatasetBundle { unpaired_synthetic, unpaired_real, paired, heldout },
    ))
}
