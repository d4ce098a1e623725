//! Minimal PPM support: binary `P6` for writing, `P6` and text `P3` for reading.
//! Images are held channel-major (`3 x h x w`) with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::dim("encode_ppm", image.shape(), &[3, 0, 0]));
    };
    if *c != 3 {
        return Err(Error::dim("encode_ppm", image.shape(), &[3, *h, *w]));
    }
    let (h, w) = (*h, *w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for j in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + j].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let mut header = Vec::new();
    while header.len() < 4 {
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
            return Err(Error::Format {
                offset: pos as u64,
                msg: "truncated PPM header".into(),
            });
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |i: usize| -> Result<usize> {
        header[i].parse().map_err(|_| Error::Format {
            offset: 0,
            msg: format!("bad PPM header field {:?}", header[i]),
        })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported PPM maxval {maxval}"),
        });
    }
    let samples: Vec<u8> = match header[0].as_str() {
        "P6" => {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            if body.len() < 3 * w * h {
                return Err(Error::Format {
                    offset: (pos + 1 + body.len()) as u64,
                    msg: "truncated PPM raster".into(),
                });
            }
            body[..3 * w * h].to_vec()
        }
        "P3" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: Vec<u8> = text
                .split_whitespace()
                .take(3 * w * h)
                .map(|t| t.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    offset: pos as u64,
                    msg: format!("bad P3 sample: {e}"),
                })?;
            if vals.len() < 3 * w * h {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    msg: "truncated PPM raster".into(),
                });
            }
            vals
        }
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported PPM magic {other:?}"),
            })
        }
    };
    let scale = maxval as f32;
    let mut data = vec![0f32; 3 * h * w];
    for j in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + j] = samples[3 * j + ch] as f32 / scale;
        }
    }
    Tensor::new(vec![3, h, w], data)
}
