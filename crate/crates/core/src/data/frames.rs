use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::process::{Command, Stdio};

use image::codecs::gif::{GifDecoder, GifEncoder, Repeat};
use image::{AnimationDecoder, Delay, Frame, RgbaImage};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Decodes every `stride`-th frame (indices `0, stride, 2*stride, ...`).
///
/// Animated GIFs are decoded in-process; other containers are piped through an
/// `ffmpeg` executable when one is on `PATH`.
pub fn extract_frames(video_path: &Path, stride: usize) -> Result<Vec<ImageTensor>> {
    if stride < 1 {
        return Err(Error::Argument("frame stride must be >= 1".into()));
    }
    let is_gif = video_path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("gif"));
    if is_gif {
        extract_gif(video_path, stride)
    } else {
        extract_ffmpeg(video_path, stride)
    }
}

fn extract_gif(path: &Path, stride: usize) -> Result<Vec<ImageTensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let image_err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let decoder = GifDecoder::new(BufReader::new(file)).map_err(image_err)?;
    let mut out = Vec::new();
    for (i, frame) in decoder.into_frames().enumerate() {
        let frame = frame.map_err(image_err)?;
        if i % stride != 0 {
            continue;
        }
        let rgba = frame.into_buffer();
        let rgb: Vec<u8> = rgba.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2]]).collect();
        out.push(ImageTensor::from_u8(rgba.height() as usize, rgba.width() as usize, 3, &rgb)?);
    }
    Ok(out)
}

fn extract_ffmpeg(path: &Path, stride: usize) -> Result<Vec<ImageTensor>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let probe = Command::new("ffprobe")
        .args(["-v", "error", "-select_streams", "v:0", "-show_entries", "stream=width,height", "-of", "csv=p=0"])
        .arg(path)
        .output()
        .map_err(|e| Error::io(path, e))?;
    let dims = String::from_utf8_lossy(&probe.stdout);
    let mut it = dims.trim().split(',').map(|s| s.trim().parse::<usize>());
    let (w, h) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) if probe.status.success() => (w, h),
        _ => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: "unreadable video container".into(),
            })
        }
    };
    let mut child = Command::new("ffmpeg")
        .args(["-v", "error", "-i"])
        .arg(path)
        .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| Error::io(path, e))?;
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut buf = vec![0u8; w * h * 3];
    let mut out = Vec::new();
    let mut index = 0;
    while stdout.read_exact(&mut buf).is_ok() {
        if index % stride == 0 {
            out.push(ImageTensor::from_u8(h, w, 3, &buf)?);
        }
        index += 1;
    }
    child.wait().map_err(|e| Error::io(path, e))?;
    Ok(out)
}

/// Writes frames as an animated GIF (used for bundled clips and tests).
pub fn write_gif(path: &Path, frames: &[ImageTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new_with_speed(file, 10);
    let image_err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    enc.set_repeat(Repeat::Infinite).map_err(image_err)?;
    for f in frames {
        let rgb = f.to_rgb().to_u8();
        let rgba: Vec<u8> = rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        let buf = RgbaImage::from_raw(f.width() as u32, f.height() as u32, rgba).expect("frame dimensions");
        enc.encode_frame(Frame::from_parts(buf, 0, 0, Delay::from_numer_denom_ms(40, 1)))
            .map_err(image_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.gif");
        // Frame i is a flat gray whose level encodes i.
        let frames: Vec<_> = (0..n).map(|i| ImageTensor::filled(6, 8, 3, i as f32 / 10.0 - 0.5)).collect();
        write_gif(&path, &frames).unwrap();
        (dir, path)
    }

    fn level(f: &ImageTensor) -> usize {
        ((f.get(0, 0, 0) + 0.5) * 10.0).round() as usize
    }

    #[test]
    fn stride_one_returns_every_frame() {
        let (_dir, path) = clip(10);
        let frames = extract_frames(&path, 1).unwrap();
        assert_eq!(frames.len(), 10);
        assert_eq!((frames[0].width(), frames[0].height()), (8, 6));
    }

    #[test]
    fn stride_three_selects_multiples() {
        let (_dir, path) = clip(10);
        let frames = extract_frames(&path, 3).unwrap();
        let expected: Vec<usize> = (0..10).filter(|i| i % 3 == 0).collect();
        assert_eq!(frames.iter().map(level).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn stride_zero_is_an_argument_error() {
        let (_dir, path) = clip(2);
        assert!(matches!(extract_frames(&path, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn unreadable_container_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.gif");
        std::fs::write(&path, b"not a gif").unwrap();
        assert!(extract_frames(&path, 1).is_err());
        assert!(extract_frames(&dir.path().join("missing.mp4"), 1).is_err());
    }
}
