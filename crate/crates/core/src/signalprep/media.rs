//! Binary PPM (P6) frames and 16-bit PCM WAV audio.

use std::fs;
use std::path::Path;

use crate::error::{MovError, Result};

/// 8-bit interleaved image, `height x width x channels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(MovError::invalid(format!(
                "image {height}x{width}x{channels} cannot hold {} bytes",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [u8] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Luma in `[0, 255]` as `f64`, row-major.
    pub fn to_gray(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64).collect(),
            _ => self
                .data
                .chunks_exact(self.channels)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
        }
    }

    /// Sub-image starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(MovError::invalid(format!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let o = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[o..o + w * self.channels]);
        }
        Image::new(h, w, self.channels, data)
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |r: &str| MovError::format(path, r.to_string());
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P6") {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut num = || -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed PPM header"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("only 8-bit PPM supported"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated PPM data"));
    }
    Image::new(h, w, 3, bytes[pos..pos + need].to_vec()).map_err(|e| bad(&e.to_string()))
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(MovError::invalid("PPM output needs 3 channels"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| MovError::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| MovError::io(path, e))
}

/// Multi-channel audio as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawAudio {
    pub sample_rate: u32,
    /// One sample vector per channel, values in `[-1, 1]`.
    pub channels: Vec<Vec<f64>>,
}

pub fn read_wav(path: &Path) -> Result<RawAudio> {
    let bad = |e: hound::Error| MovError::format(path, e.to_string());
    let mut reader = hound::WavReader::open(path).map_err(bad)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 {
        return Err(MovError::format(path, "zero channels"));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
    };
    let mut channels = vec![Vec::with_capacity(samples.len() / nch); nch];
    for (i, s) in samples.into_iter().enumerate() {
        channels[i % nch].push(s);
    }
    Ok(RawAudio {
        sample_rate: spec.sample_rate,
        channels,
    })
}

/// Writes mono 16-bit PCM; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let bad = |e: hound::Error| MovError::format(path, e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(bad)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(bad)?;
    }
    w.finalize().map_err(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let img = Image::new(2, 3, 3, (0..18).map(|i| i as u8 * 10).collect()).unwrap();
        let mut bytes = encode_ppm(&img).unwrap();
        bytes.splice(3..3, b"# note\n".iter().cloned());
        assert_eq!(decode_ppm(&bytes, Path::new("m")).unwrap(), img);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0", Path::new("m")).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin() * 0.5).collect();
        write_wav(&p, 8000, &s).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.channels.len(), 1);
        for (a, b) in back.channels[0].iter().zip(&s) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn crop_bounds() {
        let img = Image::filled(4, 4, 3, 7);
        assert_eq!(img.crop(1, 1, 3, 3).unwrap().data.len(), 27);
        assert!(img.crop(2, 2, 3, 3).is_err());
    }
}
