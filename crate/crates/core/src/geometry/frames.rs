//! On-disk frame formats: P6 PPM color, P5 PGM labels, raw little-endian
//! f32 depth, and a plain-text camera file.
//!
//! A scene directory holds one frame per index as
//! `frame_NNN.ppm` / `frame_NNN.depth` / `frame_NNN.pgm` / `frame_NNN.cam`,
//! numbered from 000 without gaps. The camera file is one `fx fy cu cv`
//! line, three rows of the camera->world rotation, then the translation row.
//! Image dimensions come from the PPM header.

use super::{Camera, Frame, Pose};
use crate::error::{CoreError, Result};
use nalgebra::{Matrix3, Vector3};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

fn format_err(offset: u64, what: impl Into<String>) -> CoreError {
    CoreError::Format {
        offset,
        what: what.into(),
    }
}

/// Skip PNM whitespace and `#` comments, returning the next token.
fn pnm_token(data: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(start as u64, "unexpected end of PNM header"));
    }
    Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

fn pnm_header(data: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0;
    let got = pnm_token(data, &mut pos)?;
    if got != magic {
        return Err(format_err(0, format!("expected {magic} magic, got {got:?}")));
    }
    let width: usize = pnm_token(data, &mut pos)?
        .parse()
        .map_err(|_| format_err(pos as u64, "bad width"))?;
    let height: usize = pnm_token(data, &mut pos)?
        .parse()
        .map_err(|_| format_err(pos as u64, "bad height"))?;
    let maxval: usize = pnm_token(data, &mut pos)?
        .parse()
        .map_err(|_| format_err(pos as u64, "bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(pos as u64, format!("maxval {maxval} != 255")));
    }
    pos += 1; // single whitespace byte after maxval
    Ok((width, height, pos))
}

/// Read a P6 PPM into row-major HxWx3 values in [0,1].
pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let data = fs::read(path)?;
    let (width, height, start) = pnm_header(&data, "P6")?;
    let need = 3 * width * height;
    if data.len() < start + need {
        return Err(format_err(
            data.len() as u64,
            format!("truncated P6 payload, need {} bytes", start + need),
        ));
    }
    let rgb = data[start..start + need]
        .iter()
        .map(|b| f64::from(*b) / 255.0)
        .collect();
    Ok((rgb, width, height))
}

pub fn write_ppm(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = Vec::with_capacity(20 + rgb.len());
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.extend(
        rgb.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out)?;
    Ok(())
}

/// Read a P5 PGM of class ids.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let data = fs::read(path)?;
    let (width, height, start) = pnm_header(&data, "P5")?;
    let need = width * height;
    if data.len() < start + need {
        return Err(format_err(
            data.len() as u64,
            format!("truncated P5 payload, need {} bytes", start + need),
        ));
    }
    Ok((data[start..start + need].to_vec(), width, height))
}

pub fn write_pgm(path: &Path, labels: &[u8], width: usize, height: usize) -> Result<()> {
    assert_eq!(labels.len(), width * height);
    let mut out = Vec::with_capacity(20 + labels.len());
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Read raw row-major little-endian f32 depth, validated against the
/// expected pixel count.
pub fn read_depth_raw(path: &Path, width: usize, height: usize) -> Result<Vec<f64>> {
    let data = fs::read(path)?;
    let need = 4 * width * height;
    if data.len() != need {
        return Err(format_err(
            data.len().min(need) as u64,
            format!("depth payload is {} bytes, expected {need}", data.len()),
        ));
    }
    Ok(data
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn write_depth_raw(path: &Path, depth: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(4 * depth.len());
    for d in depth {
        out.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse the plain-text camera file; dimensions are supplied by the caller.
pub fn read_camera(path: &Path, width: usize, height: usize) -> Result<Camera> {
    let text = fs::read_to_string(path)?;
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| format_err(0, format!("bad number {t:?} in camera file")))
        })
        .collect::<Result<_>>()?;
    if nums.len() != 16 {
        return Err(format_err(
            0,
            format!("camera file has {} numbers, expected 16", nums.len()),
        ));
    }
    let rotation = Matrix3::new(
        nums[4], nums[5], nums[6], nums[7], nums[8], nums[9], nums[10], nums[11], nums[12],
    );
    let translation = Vector3::new(nums[13], nums[14], nums[15]);
    let pose = Pose::new(rotation, translation)?;
    Camera::new(nums[0], nums[1], nums[2], nums[3], width, height, pose)
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    let r = cam.pose.rotation;
    let t = cam.pose.translation;
    let mut text = format!("{} {} {} {}\n", cam.fx, cam.fy, cam.cu, cam.cv);
    for row in 0..3 {
        text.push_str(&format!(
            "{:.17} {:.17} {:.17}\n",
            r[(row, 0)],
            r[(row, 1)],
            r[(row, 2)]
        ));
    }
    text.push_str(&format!("{:.17} {:.17} {:.17}\n", t.x, t.y, t.z));
    fs::write(path, text)?;
    Ok(())
}

fn frame_paths(dir: &Path, index: usize) -> [PathBuf; 4] {
    [
        dir.join(format!("frame_{index:03}.ppm")),
        dir.join(format!("frame_{index:03}.depth")),
        dir.join(format!("frame_{index:03}.pgm")),
        dir.join(format!("frame_{index:03}.cam")),
    ]
}

/// Load one frame by index from a scene directory.
pub fn read_frame(dir: &Path, index: usize) -> Result<Frame> {
    let [ppm, depth_path, pgm, cam_path] = frame_paths(dir, index);
    let (rgb, width, height) = read_ppm(&ppm)?;
    let depth = read_depth_raw(&depth_path, width, height)?;
    let (labels, lw, lh) = read_pgm(&pgm)?;
    if (lw, lh) != (width, height) {
        return Err(CoreError::RejectedInput(format!(
            "label image is {lw}x{lh}, color is {width}x{height}"
        )));
    }
    let camera = read_camera(&cam_path, width, height)?;
    let frame = Frame {
        rgb,
        depth,
        labels,
        camera,
    };
    frame.validate()?;
    Ok(frame)
}

pub fn write_frame(dir: &Path, index: usize, frame: &Frame) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [ppm, depth_path, pgm, cam_path] = frame_paths(dir, index);
    let (w, h) = (frame.camera.width, frame.camera.height);
    write_ppm(&ppm, &frame.rgb, w, h)?;
    write_depth_raw(&depth_path, &frame.depth)?;
    write_pgm(&pgm, &frame.labels, w, h)?;
    write_camera(&cam_path, &frame.camera)
}

/// Load `frame_000` upward until the first missing index.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    loop {
        let ppm = dir.join(format!("frame_{:03}.ppm", frames.len()));
        if !ppm.exists() {
            break;
        }
        frames.push(read_frame(dir, frames.len())?);
    }
    if frames.is_empty() {
        return Err(CoreError::RejectedInput(format!(
            "no frame_000.ppm found in {}",
            dir.display()
        )));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn frame_round_trip() {
        let dir = tempdir().unwrap();
        let cam = Camera::new(
            32.0,
            31.5,
            16.0,
            15.5,
            32,
            32,
            Pose::from_yaw(Vector3::new(0.5, 1.0, 1.2), 0.9),
        )
        .unwrap();
        let n = 32 * 32;
        let frame = Frame {
            rgb: (0..3 * n).map(|i| (i % 256) as f64 / 255.0).collect(),
            depth: (0..n).map(|i| i as f64 * 0.01).collect(),
            labels: (0..n).map(|i| (i % 7) as u8).collect(),
            camera: cam,
        };
        write_frame(dir.path(), 0, &frame).unwrap();
        let back = read_frame(dir.path(), 0).unwrap();
        assert_eq!(back.labels, frame.labels);
        for (a, b) in back.rgb.iter().zip(frame.rgb.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 / 2.0 + 1e-12);
        }
        for (a, b) in back.depth.iter().zip(frame.depth.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((back.camera.fx - 32.0).abs() < 1e-12);
        assert!((back.camera.pose.translation - frame.camera.pose.translation).norm() < 1e-12);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P5\n2 2\n255\n0000").unwrap();
        match read_ppm(&path) {
            Err(CoreError::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }
}
