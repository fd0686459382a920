use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use priorfield::{Image, SdfGrid, VoxelField};
use serde_json::Value;

use crate::error::{usage, CliResult};

pub enum Scene {
    Prior(SdfGrid),
    Field(VoxelField),
}

/// Loads an SDFG or VFLD file, told apart by magic bytes.
pub fn load_scene(path: &Path) -> CliResult<Scene> {
    let mut magic = [0u8; 4];
    File::open(path)?.read_exact(&mut magic)?;
    match &magic {
        b"SDFG" => Ok(Scene::Prior(SdfGrid::load(path)?)),
        b"VFLD" => Ok(Scene::Field(VoxelField::load(path)?)),
        _ => Err(usage(format!("{} is neither an SDFG nor a VFLD file", path.display()))),
    }
}

pub fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
    }
    Ok(out)
}

/// 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Image) -> io::Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(io::Error::other)?;
    writer.write_image_data(&image.to_rgb8()).map_err(io::Error::other)?;
    writer.finish().map_err(io::Error::other)
}

/// Pretty JSON via a temporary file and rename.
pub fn write_json_atomic(path: &Path, value: &Value) -> CliResult {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut w, value).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
