use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{IdentityDataset, Record, Side};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Encodes an image `[3, H, W]` with values in [0, 1] as binary PPM.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::arg(format!("ppm needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit images are supported, maxval {max}"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != 3 * w * h {
        return Err(format!("expected {} raster bytes, found {}", 3 * w * h, raster.len()));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raster.chunks(3).enumerate() {
        let (y, x) = (i / w, i % w);
        for c in 0..3 {
            data[(c * h + y) * w + x] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|msg| Error::Parse { path: path.to_path_buf(), line: 0, msg })
}

/// Writes every image under `dir/images/` and a manifest at `dir/manifest.tsv`.
pub fn write_dataset(dir: &Path, ds: &IdentityDataset) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = String::new();
    for (i, r) in ds.records.iter().enumerate() {
        let rel = format!("images/{i:06}.ppm");
        write_ppm(&dir.join(&rel), &r.image)?;
        manifest.push_str(&format!("{rel}\t{}\t{}\t{}\n", r.identity, r.view, r.side));
    }
    let path = dir.join(MANIFEST_NAME);
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Reads a tab-separated `path identity view split` manifest; image paths
/// are relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<IdentityDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut records = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(ln, format!("expected 4 tab-separated columns, found {}", cols.len())));
        }
        let identity = cols[1].parse::<usize>().map_err(|e| err(ln, format!("identity {:?}: {e}", cols[1])))?;
        let view = cols[2].parse::<usize>().map_err(|e| err(ln, format!("view {:?}: {e}", cols[2])))?;
        let side = cols[3].parse::<Side>().map_err(|e| err(ln, e.to_string()))?;
        let img_path = base.join(cols[0]);
        let bytes = fs::read(&img_path).map_err(|e| err(ln, format!("cannot read {}: {e}", img_path.display())))?;
        let image = decode_ppm(&bytes).map_err(|m| err(ln, format!("{}: {m}", img_path.display())))?;
        let hw = (image.shape()[1], image.shape()[2]);
        match size {
            None => size = Some(hw),
            Some(s) if s != hw => return Err(err(ln, format!("image size {hw:?} differs from {s:?}"))),
            _ => {}
        }
        records.push(Record { image, identity, view, side });
    }
    let (h, w) = size.ok_or_else(|| err(0, "manifest has no records".into()))?;
    IdentityDataset::new(h, w, records)
}
