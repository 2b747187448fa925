//! Frame access for video files.
//!
//! YUV4MPEG2 (`.y4m`) is decoded natively with random access to any frame.
//! Other containers go through `ffprobe`/`ffmpeg` when those binaries are on
//! `PATH`; without them such files fail with a decode error.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoInfo {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub frame_count: usize,
}

impl VideoInfo {
    pub fn duration(&self) -> f64 {
        self.frame_count as f64 / self.fps
    }

    /// Index of the frame displayed closest to `t` seconds.
    pub fn nearest_frame(&self, t: f64) -> usize {
        let idx = (t * self.fps).round().max(0.0) as usize;
        idx.min(self.frame_count.saturating_sub(1))
    }
}

pub trait VideoSource: Send {
    fn info(&self) -> VideoInfo;
    fn frame(&mut self, index: usize) -> Result<RgbImage>;
}

pub fn open_video(path: &Path) -> Result<Box<dyn VideoSource>> {
    let is_y4m = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m"));
    if is_y4m {
        return Ok(Box::new(Y4mReader::open(path)?));
    }
    if !path.exists() {
        return Err(decode_err(path, "file does not exist"));
    }
    Ok(Box::new(FfmpegSource::open(path)?))
}

fn decode_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Decode { path: path.to_path_buf(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Chroma {
    C420,
    C422,
    C444,
    Mono,
}

pub struct Y4mReader {
    path: PathBuf,
    file: BufReader<File>,
    info: VideoInfo,
    chroma: Chroma,
    full_range: bool,
    frame_offsets: Vec<u64>,
}

impl Y4mReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| decode_err(path, e.to_string()))?;
        let file_len = file.metadata().map_err(|e| decode_err(path, e.to_string()))?.len();
        let mut file = BufReader::new(file);
        let mut header = Vec::new();
        file.read_until(b'\n', &mut header).map_err(|e| decode_err(path, e.to_string()))?;
        let header = std::str::from_utf8(&header).map_err(|_| decode_err(path, "header is not ASCII"))?;
        let mut tokens = header.trim_end().split(' ');
        if tokens.next() != Some("YUV4MPEG2") {
            return Err(decode_err(path, "missing YUV4MPEG2 signature"));
        }
        let (mut width, mut height, mut fps) = (0u32, 0u32, 0.0f64);
        let mut chroma = Chroma::C420;
        let mut full_range = false;
        for token in tokens.filter(|t| !t.is_empty()) {
            let (tag, value) = token.split_at(1);
            match tag {
                "W" => width = value.parse().map_err(|_| decode_err(path, "bad width"))?,
                "H" => height = value.parse().map_err(|_| decode_err(path, "bad height"))?,
                "F" => {
                    let (n, d) = value.split_once(':').ok_or_else(|| decode_err(path, "bad frame rate"))?;
                    let n: f64 = n.parse().map_err(|_| decode_err(path, "bad frame rate"))?;
                    let d: f64 = d.parse().map_err(|_| decode_err(path, "bad frame rate"))?;
                    fps = n / d;
                }
                "C" => {
                    chroma = match value {
                        "420" | "420jpeg" | "420mpeg2" | "420paldv" => Chroma::C420,
                        "422" => Chroma::C422,
                        "444" => Chroma::C444,
                        "mono" => Chroma::Mono,
                        other => return Err(decode_err(path, format!("unsupported colourspace C{other}"))),
                    }
                }
                "X" if value == "COLORRANGE=FULL" => full_range = true,
                _ => {}
            }
        }
        if width == 0 || height == 0 || !(fps.is_finite() && fps > 0.0) {
            return Err(decode_err(path, "header lacks width, height or frame rate"));
        }
        let (cw, ch) = chroma_dims(chroma, width as usize, height as usize);
        let frame_bytes = (width as usize * height as usize + 2 * cw * ch) as u64;

        // Frame headers may carry parameters, so every header is scanned once.
        let mut frame_offsets = Vec::new();
        let mut pos = file.stream_position().map_err(|e| decode_err(path, e.to_string()))?;
        let mut line = Vec::new();
        while pos < file_len {
            line.clear();
            let n = file.read_until(b'\n', &mut line).map_err(|e| decode_err(path, e.to_string()))?;
            if n == 0 {
                break;
            }
            if !line.starts_with(b"FRAME") {
                return Err(decode_err(path, format!("expected FRAME marker at byte {pos}")));
            }
            let data_start = pos + n as u64;
            if data_start + frame_bytes > file_len {
                break; // truncated trailing frame
            }
            frame_offsets.push(data_start);
            pos = data_start + frame_bytes;
            file.seek(SeekFrom::Start(pos)).map_err(|e| decode_err(path, e.to_string()))?;
        }
        if frame_offsets.is_empty() {
            return Err(decode_err(path, "no complete frames"));
        }
        let info = VideoInfo { width, height, fps, frame_count: frame_offsets.len() };
        Ok(Self { path: path.to_path_buf(), file, info, chroma, full_range, frame_offsets })
    }
}

fn chroma_dims(chroma: Chroma, w: usize, h: usize) -> (usize, usize) {
    match chroma {
        Chroma::C420 => (w.div_ceil(2), h.div_ceil(2)),
        Chroma::C422 => (w.div_ceil(2), h),
        Chroma::C444 => (w, h),
        Chroma::Mono => (0, 0),
    }
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn yuv_to_rgb(y: u8, u: u8, v: u8, full_range: bool) -> [u8; 3] {
    let (y, u, v) = (y as f32, u as f32 - 128.0, v as f32 - 128.0);
    if full_range {
        [
            clamp_u8(y + 1.402 * v),
            clamp_u8(y - 0.344_136 * u - 0.714_136 * v),
            clamp_u8(y + 1.772 * u),
        ]
    } else {
        let y = 1.164_383 * (y - 16.0);
        [
            clamp_u8(y + 1.596_027 * v),
            clamp_u8(y - 0.391_762 * u - 0.812_968 * v),
            clamp_u8(y + 2.017_232 * u),
        ]
    }
}

impl VideoSource for Y4mReader {
    fn info(&self) -> VideoInfo {
        self.info
    }

    fn frame(&mut self, index: usize) -> Result<RgbImage> {
        let offset = *self
            .frame_offsets
            .get(index)
            .ok_or_else(|| decode_err(&self.path, format!("frame {index} out of range")))?;
        let (w, h) = (self.info.width as usize, self.info.height as usize);
        let (cw, ch) = chroma_dims(self.chroma, w, h);
        let mut buf = vec![0u8; w * h + 2 * cw * ch];
        self.file.seek(SeekFrom::Start(offset)).map_err(|e| decode_err(&self.path, e.to_string()))?;
        self.file.read_exact(&mut buf).map_err(|e| decode_err(&self.path, e.to_string()))?;
        let (luma, rest) = buf.split_at(w * h);
        let (cb, cr) = rest.split_at(cw * ch);
        let mut img = RgbImage::new(w as u32, h as u32);
        for yy in 0..h {
            for xx in 0..w {
                let (u, v) = match self.chroma {
                    Chroma::Mono => (128, 128),
                    _ => {
                        let cx = xx * cw / w;
                        let cy = yy * ch / h;
                        (cb[cy * cw + cx], cr[cy * cw + cx])
                    }
                };
                let px = yuv_to_rgb(luma[yy * w + xx], u, v, self.full_range);
                img.put_pixel(xx as u32, yy as u32, image::Rgb(px));
            }
        }
        Ok(img)
    }
}

/// Writes frames as full-range 4:4:4 YUV4MPEG2 at `fps` frames per second.
pub fn write_y4m(path: &Path, frames: &[RgbImage], fps: u32) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::EmptyInput("no frames to write".into()))?;
    let (w, h) = first.dimensions();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = format!("YUV4MPEG2 W{w} H{h} F{fps}:1 Ip A1:1 C444 XCOLORRANGE=FULL\n").into_bytes();
    let n = (w * h) as usize;
    let mut planes = vec![0u8; 3 * n];
    for frame in frames {
        if frame.dimensions() != (w, h) {
            return Err(Error::Precondition("all frames must share one size".into()));
        }
        for (i, px) in frame.pixels().enumerate() {
            let [r, g, b] = px.0.map(f32::from);
            planes[i] = clamp_u8(0.299 * r + 0.587 * g + 0.114 * b);
            planes[n + i] = clamp_u8(128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b);
            planes[2 * n + i] = clamp_u8(128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b);
        }
        body.extend_from_slice(b"FRAME\n");
        body.extend_from_slice(&planes);
        out.write_all(&body).map_err(|e| Error::io(path, e))?;
        body.clear();
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Decodes through external `ffprobe`/`ffmpeg` processes, one seek per frame.
pub struct FfmpegSource {
    path: PathBuf,
    info: VideoInfo,
}

impl FfmpegSource {
    pub fn open(path: &Path) -> Result<Self> {
        let output = Command::new("ffprobe")
            .args(["-v", "error", "-select_streams", "v:0", "-count_packets"])
            .args(["-show_entries", "stream=width,height,avg_frame_rate,nb_read_packets"])
            .args(["-of", "json"])
            .arg(path)
            .output()
            .map_err(|e| decode_err(path, format!("no native decoder for this container and ffprobe unavailable: {e}")))?;
        if !output.status.success() {
            return Err(decode_err(path, String::from_utf8_lossy(&output.stderr).trim().to_string()));
        }
        let probe: serde_json::Value =
            serde_json::from_slice(&output.stdout).map_err(|e| decode_err(path, e.to_string()))?;
        let stream = probe["streams"].get(0).ok_or_else(|| decode_err(path, "no video stream"))?;
        let field = |k: &str| stream[k].as_u64().or_else(|| stream[k].as_str().and_then(|s| s.parse().ok()));
        let rate = stream["avg_frame_rate"].as_str().unwrap_or("0/1");
        let fps = match rate.split_once('/') {
            Some((n, d)) => n.parse::<f64>().unwrap_or(0.0) / d.parse::<f64>().unwrap_or(1.0),
            None => rate.parse().unwrap_or(0.0),
        };
        let info = VideoInfo {
            width: field("width").unwrap_or(0) as u32,
            height: field("height").unwrap_or(0) as u32,
            fps,
            frame_count: field("nb_read_packets").unwrap_or(0) as usize,
        };
        if info.width == 0 || info.height == 0 || info.frame_count == 0 || !(fps > 0.0) {
            return Err(decode_err(path, "ffprobe reported an empty or malformed stream"));
        }
        Ok(Self { path: path.to_path_buf(), info })
    }
}

impl VideoSource for FfmpegSource {
    fn info(&self) -> VideoInfo {
        self.info
    }

    fn frame(&mut self, index: usize) -> Result<RgbImage> {
        let output = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(&self.path)
            .args(["-vf", &format!("select=eq(n\\,{index})"), "-frames:v", "1"])
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .output()
            .map_err(|e| decode_err(&self.path, e.to_string()))?;
        let (w, h) = (self.info.width, self.info.height);
        if !output.status.success() || output.stdout.len() != (w * h * 3) as usize {
            return Err(decode_err(&self.path, format!("could not decode frame {index}")));
        }
        Ok(RgbImage::from_raw(w, h, output.stdout).expect("buffer size checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32, k: u8) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 9) as u8, (y * 7) as u8, k]))
    }

    #[test]
    fn y4m_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.y4m");
        let frames: Vec<RgbImage> = (0..5).map(|k| gradient(13, 9, k * 40)).collect();
        write_y4m(&path, &frames, 10).unwrap();
        let mut reader = open_video(&path).unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height, info.frame_count), (13, 9, 5));
        assert!((info.duration() - 0.5).abs() < 1e-12);
        for (k, expected) in frames.iter().enumerate() {
            let got = reader.frame(k).unwrap();
            for (a, b) in got.pixels().zip(expected.pixels()) {
                for c in 0..3 {
                    assert!((a[c] as i32 - b[c] as i32).abs() <= 2, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn reads_subsampled_limited_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.y4m");
        // 4x2 mid-grey 4:2:0 frame in limited range
        let mut bytes = b"YUV4MPEG2 W4 H2 F25:1 C420jpeg\nFRAME\n".to_vec();
        bytes.extend([126u8; 8]);
        bytes.extend([128u8; 4]);
        bytes.extend(b"FRAME Ixyz\n");
        bytes.extend([235u8; 8]);
        bytes.extend([128u8; 4]);
        bytes.extend(b"FRAME\n\x01\x02"); // truncated trailing frame
        std::fs::write(&path, bytes).unwrap();
        let mut r = Y4mReader::open(&path).unwrap();
        assert_eq!(r.info().frame_count, 2);
        assert_eq!(r.frame(0).unwrap().get_pixel(3, 1).0, [128, 128, 128]);
        assert_eq!(r.frame(1).unwrap().get_pixel(0, 0).0, [255, 255, 255]);
        assert!(r.frame(2).is_err());
    }

    #[test]
    fn garbage_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.y4m");
        std::fs::write(&path, b"not a video").unwrap();
        assert!(matches!(open_video(&path), Err(Error::Decode { .. })));
        assert!(matches!(open_video(&dir.path().join("missing.mp4")), Err(Error::Decode { .. })));
    }

    #[test]
    fn nearest_frame_clamps() {
        let info = VideoInfo { width: 1, height: 1, fps: 30.0, frame_count: 10 };
        assert_eq!(info.nearest_frame(0.0), 0);
        assert_eq!(info.nearest_frame(0.049), 1);
        assert_eq!(info.nearest_frame(5.0), 9);
    }
}
