//! Input tensors for the CLI: synthetic patterns and raw PNM images.
//!
//! Synthetic specs are `checker:N`, `noise:N:SEED`, and `ramp:N`; each
//! produces an `N x N` image with the channel count and bit width the
//! network expects. 8-bit patterns span 0..=255; 2-bit patterns use the four
//! codes; 32-bit patterns are scaled into [0, 1].

use std::fs;
use std::path::Path;

use condense_core::error::{Error, Result};
use condense_core::netdef::NetworkDef;
use condense_core::tensor::{BitWidth, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scale_for(bits: BitWidth, byte: u32) -> f32 {
    match bits {
        BitWidth::B8 => byte as f32,
        BitWidth::B2 => (byte / 64) as f32,
        BitWidth::B32 => byte as f32 / 255.0,
    }
}

fn fill(net: &NetworkDef, mut value: impl FnMut(usize, usize, usize) -> f32) -> Tensor {
    let mut t = Tensor::zeros(net.input_h, net.input_w, net.input_c, net.input_bits);
    let narrow = t.natural_narrowing();
    for c in 0..net.input_c {
        for y in 0..net.input_h {
            for x in 0..net.input_w {
                t.set(c, y, x, value(c, y, x), narrow);
            }
        }
    }
    t
}

fn check_size(net: &NetworkDef, n: usize, spec: &str) -> Result<()> {
    if net.input_h != n || net.input_w != n {
        return Err(Error::InputMismatch {
            message: format!(
                "pattern `{spec}` is {n}x{n} but the network expects {}x{}",
                net.input_h, net.input_w
            ),
        });
    }
    Ok(())
}

/// Build the input tensor from a synthetic-pattern spec or a PNM path.
pub fn load_input(net: &NetworkDef, source: &str) -> Result<Tensor> {
    if let Some(rest) = source.strip_prefix("checker:") {
        let n: usize = rest
            .parse()
            .map_err(|_| Error::InputMismatch { message: format!("bad checker size `{rest}`") })?;
        check_size(net, n, source)?;
        let bits = net.input_bits;
        return Ok(fill(net, |_, y, x| {
            let on = (y / 8 + x / 8) % 2 == 0;
            scale_for(bits, if on { 255 } else { 0 })
        }));
    }
    if let Some(rest) = source.strip_prefix("noise:") {
        let (n, seed) = rest
            .split_once(':')
            .ok_or_else(|| Error::InputMismatch { message: "noise spec is noise:N:SEED".into() })?;
        let n: usize = n
            .parse()
            .map_err(|_| Error::InputMismatch { message: format!("bad noise size `{n}`") })?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::InputMismatch { message: format!("bad noise seed `{seed}`") })?;
        check_size(net, n, source)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = net.input_bits;
        return Ok(fill(net, |_, _, _| scale_for(bits, rng.gen_range(0..256))));
    }
    if let Some(rest) = source.strip_prefix("ramp:") {
        let n: usize = rest
            .parse()
            .map_err(|_| Error::InputMismatch { message: format!("bad ramp size `{rest}`") })?;
        check_size(net, n, source)?;
        let bits = net.input_bits;
        return Ok(fill(net, |c, y, x| scale_for(bits, ((x + y + 85 * c) % 256) as u32)));
    }
    load_pnm(net, Path::new(source))
}

/// Minimal binary PNM reader: P5 (grayscale) and P6 (RGB), 8-bit maxval.
pub fn load_pnm(net: &NetworkDef, path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (channels, mut pos) = match &bytes.get(0..2) {
        Some(b"P5") => (1usize, 2usize),
        Some(b"P6") => (3usize, 2usize),
        _ => {
            return Err(Error::Format {
                message: format!("{}: not a binary P5/P6 PNM file", path.display()),
            })
        }
    };
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and `#` comments between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while matches!(bytes.get(pos), Some(b) if b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format { message: "malformed PNM header".into() })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format { message: format!("PNM maxval {maxval} unsupported") });
    }
    pos += 1; // single whitespace after maxval
    let data = &bytes[pos..];
    if data.len() < width * height * channels {
        return Err(Error::Format { message: "truncated PNM payload".into() });
    }
    if net.input_h != height || net.input_w != width || net.input_c != channels {
        return Err(Error::InputMismatch {
            message: format!(
                "image is {height}x{width}x{channels}, network expects {}x{}x{}",
                net.input_h, net.input_w, net.input_c
            ),
        });
    }
    let bits = net.input_bits;
    Ok(fill(net, |c, y, x| scale_for(bits, data[(y * width + x) * channels + c] as u32)))
}
