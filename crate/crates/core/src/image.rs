//! 8-bit grayscale images and binary PGM (P5) I/O.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MIN_IMAGE_SIDE: u32 = 32;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {0}x{1}")]
    TooSmall(u32, u32),
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(ImageError::TooSmall(width, height));
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::SizeMismatch {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn get_i(&self, x: i64, y: i64) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 32);
        self.write_pgm(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(mut r: R) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::parse_pgm(&bytes)
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::parse_pgm(&std::fs::read(path)?)
    }

    fn parse_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Pgm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(ImageError::Pgm(format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<u32>()
                .map_err(|_| ImageError::Pgm(format!("bad {what} {s:?}")))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if maxval != 255 {
            return Err(ImageError::Pgm(format!("only maxval 255 supported, got {maxval}")));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let n = width as usize * height as usize;
        if bytes.len() < pos + n {
            return Err(ImageError::Pgm("truncated raster".into()));
        }
        Self::new(width, height, bytes[pos..pos + n].to_vec())
    }
}
