//! Binary P6 PPM, 8 bits per channel.

use std::fs;
use std::io::Write;
use std::path::Path;

use pyrabox_core::image::Image;

use crate::error::{AppError, AppResult, FormatError};

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String, FormatError> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(FormatError::Truncated("PPM header ends early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, FormatError> {
    let tok = header_token(bytes, pos)?;
    tok.parse().map_err(|_| FormatError::Invalid(format!("PPM {what} {tok:?} is not a number")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(FormatError::BadMagic { expected: "P6", found });
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(FormatError::Invalid(format!("PPM maxval {maxval} unsupported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(FormatError::Invalid("PPM has zero extent".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let data = bytes.get(pos..pos + need).ok_or_else(|| {
        FormatError::Truncated(format!("{width}×{height} raster needs {need} bytes, found {}", bytes.len().saturating_sub(pos)))
    })?;
    Image::new(width, height, data.to_vec()).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn load_ppm(path: &Path) -> AppResult<Image> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| AppError::format(path, e))
}

pub fn write_ppm(path: &Path, image: &Image) -> AppResult<()> {
    let mut f = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    f.write_all(&encode_ppm(image)).map_err(|e| AppError::io(path, e))
}
