//! Dense feature-map tensors with low-bit packed storage, plus the block
//! extraction/insertion primitives used by the streaming executor.
//!
//! A [`Tensor`] is a fixed-rank (H, W, C) array stored channel-major then
//! row-major. Elements are 2-bit codes, 8-bit codes, or 32-bit floats; for
//! sub-byte widths elements are packed least-significant-first within each
//! byte and every row is padded to a byte boundary per channel, so the byte
//! layout is identical across hosts.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic chars of the tensor snapshot file.
pub const SNAPSHOT_MAGIC: [u8; 4] = *b"CNFM";
/// Snapshot format version.
pub const SNAPSHOT_VERSION: u32 = 1;

/// Element bit width of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum BitWidth {
    /// 2-bit unsigned codes 0..=3, four per byte.
    B2,
    /// 8-bit unsigned codes 0..=255.
    B8,
    /// 32-bit IEEE float, stored little-endian.
    B32,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B8 => 8,
            BitWidth::B32 => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            2 => Ok(BitWidth::B2),
            8 => Ok(BitWidth::B8),
            32 => Ok(BitWidth::B32),
            other => Err(Error::UnsupportedBits(other)),
        }
    }

    /// Bytes occupied by one row of `width` elements (rows are padded to a
    /// byte boundary for sub-byte widths).
    pub fn row_bytes(self, width: usize) -> usize {
        match self {
            BitWidth::B2 => (width * 2).div_ceil(8),
            BitWidth::B8 => width,
            BitWidth::B32 => width * 4,
        }
    }

    /// Largest representable code for integer widths.
    pub fn max_code(self) -> u32 {
        match self {
            BitWidth::B2 => 3,
            BitWidth::B8 => 255,
            BitWidth::B32 => u32::MAX, // not meaningful for floats
        }
    }
}

/// Storage bytes of an (H, W, C) set at the given width, including row padding.
pub fn set_bytes(height: usize, width: usize, channels: usize, bits: BitWidth) -> u64 {
    channels as u64 * height as u64 * bits.row_bytes(width) as u64
}

/// Rule for narrowing 32-bit block values back into tensor storage.
///
/// Out-of-range values saturate to the nearest representable code; they never
/// wrap around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Narrowing {
    /// Round half away from zero, clamp to `[0, max_code]`. Valid for the
    /// 2-bit and 8-bit widths.
    RoundSaturate,
    /// Store the 32-bit value as-is. Valid for the 32-bit width only.
    Store32,
}

/// A spatial rectangle inside one channel plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(y: usize, x: usize, h: usize, w: usize) -> Self {
        Rect { y, x, h, w }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Dense (H, W, C) tensor with packed element storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    bits: BitWidth,
    data: Vec<u8>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(height: usize, width: usize, channels: usize, bits: BitWidth) -> Self {
        let len = set_bytes(height, width, channels, bits) as usize;
        Tensor { height, width, channels, bits, data: vec![0; len] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    /// Packed storage bytes, canonical across hosts.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64
    }

    fn row_bytes(&self) -> usize {
        self.bits.row_bytes(self.width)
    }

    fn byte_offset(&self, channel: usize, y: usize) -> usize {
        (channel * self.height + y) * self.row_bytes()
    }

    /// Element widened to 32-bit: codes map to their exact float value,
    /// 32-bit elements are returned as stored.
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        debug_assert!(channel < self.channels && y < self.height && x < self.width);
        match self.bits {
            BitWidth::B2 => {
                let byte = self.data[self.byte_offset(channel, y) + x / 4];
                ((byte >> ((x % 4) * 2)) & 0b11) as f32
            }
            BitWidth::B8 => self.data[self.byte_offset(channel, y) + x] as f32,
            BitWidth::B32 => {
                let off = self.byte_offset(channel, y) + x * 4;
                f32::from_le_bytes(self.data[off..off + 4].try_into().unwrap())
            }
        }
    }

    /// Narrow a 32-bit value into storage at the given position.
    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f32, narrow: Narrowing) {
        debug_assert!(channel < self.channels && y < self.height && x < self.width);
        match (self.bits, narrow) {
            (BitWidth::B2, Narrowing::RoundSaturate) => {
                let code = saturate_code(value, 3);
                let off = self.byte_offset(channel, y) + x / 4;
                let shift = (x % 4) * 2;
                self.data[off] = (self.data[off] & !(0b11 << shift)) | ((code as u8) << shift);
            }
            (BitWidth::B8, Narrowing::RoundSaturate) => {
                let off = self.byte_offset(channel, y) + x;
                self.data[off] = saturate_code(value, 255) as u8;
            }
            (BitWidth::B32, Narrowing::Store32) => {
                let off = self.byte_offset(channel, y) + x * 4;
                self.data[off..off + 4].copy_from_slice(&value.to_le_bytes());
            }
            _ => unreachable!("narrowing validated before element writes"),
        }
    }

    /// The narrowing rule that matches this tensor's bit width.
    pub fn natural_narrowing(&self) -> Narrowing {
        match self.bits {
            BitWidth::B2 | BitWidth::B8 => Narrowing::RoundSaturate,
            BitWidth::B32 => Narrowing::Store32,
        }
    }

    fn check_region(&self, channel: usize, rect: Rect) -> Result<()> {
        if channel >= self.channels {
            return Err(Error::ChannelOutOfRange { channel, channels: self.channels });
        }
        if rect.y + rect.h > self.height || rect.x + rect.w > self.width || rect.h == 0 || rect.w == 0 {
            return Err(Error::RegionOutOfBounds {
                origin_y: rect.y,
                origin_x: rect.x,
                block_h: rect.h,
                block_w: rect.w,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    /// Copy a region of one channel into a fresh working block, widening each
    /// element to 32-bit. The block never aliases tensor storage.
    pub fn extract_block(&self, channel: usize, rect: Rect) -> Result<Block> {
        self.check_region(channel, rect)?;
        let mut block = Block::zeros(channel, rect);
        for by in 0..rect.h {
            for bx in 0..rect.w {
                block.values[by * rect.w + bx] = self.get(channel, rect.y + by, rect.x + bx);
            }
        }
        Ok(block)
    }

    /// Overwrite the block's region with its narrowed values; every element
    /// outside the region is left untouched.
    pub fn insert_block(&mut self, block: &Block, narrow: Narrowing) -> Result<()> {
        let valid = matches!(
            (self.bits, narrow),
            (BitWidth::B2, Narrowing::RoundSaturate)
                | (BitWidth::B8, Narrowing::RoundSaturate)
                | (BitWidth::B32, Narrowing::Store32)
        );
        if !valid {
            return Err(Error::InvalidNarrowing {
                bits: self.bits.bits(),
                rule: match narrow {
                    Narrowing::RoundSaturate => "round-saturate",
                    Narrowing::Store32 => "store32",
                },
            });
        }
        let rect = block.rect();
        self.check_region(block.channel, rect)?;
        for by in 0..rect.h {
            for bx in 0..rect.w {
                self.set(
                    block.channel,
                    rect.y + by,
                    rect.x + bx,
                    block.values[by * rect.w + bx],
                    narrow,
                );
            }
        }
        Ok(())
    }

    /// Write the `CNFM` snapshot: magic, version, H/W/C/bits as u32 LE, then
    /// the packed data.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        for field in [self.height as u32, self.width as u32, self.channels as u32, self.bits.bits()] {
            w.write_all(&field.to_le_bytes())?;
        }
        w.write_all(&self.data)?;
        Ok(())
    }

    /// Read a `CNFM` snapshot written by [`Tensor::write_snapshot`].
    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "snapshot header")?;
        if magic != SNAPSHOT_MAGIC {
            return Err(Error::Format { message: format!("bad snapshot magic {magic:?}") });
        }
        let version = read_u32(r, "snapshot version")?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format { message: format!("unsupported snapshot version {version}") });
        }
        let height = read_u32(r, "snapshot height")? as usize;
        let width = read_u32(r, "snapshot width")? as usize;
        let channels = read_u32(r, "snapshot channels")? as usize;
        let bits = BitWidth::from_bits(read_u32(r, "snapshot bits")?)?;
        let mut t = Tensor::zeros(height, width, channels, bits);
        read_exact(r, &mut t.data, "snapshot data")?;
        Ok(t)
    }
}

fn saturate_code(value: f32, max_code: u32) -> u32 {
    if value.is_nan() || value <= 0.0 {
        // NaN and negatives both land on the zero code.
        return 0;
    }
    let rounded = value.round();
    if rounded >= max_code as f32 {
        max_code
    } else {
        rounded as u32
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format { message: format!("truncated while reading {what}") }
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// A spatial tile of a single channel holding 32-bit working values
/// (pre-narrowing partial results). Always an explicit copy, never a view.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub channel: usize,
    pub origin_y: usize,
    pub origin_x: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub values: Vec<f32>,
}

impl Block {
    pub fn zeros(channel: usize, rect: Rect) -> Self {
        Block {
            channel,
            origin_y: rect.y,
            origin_x: rect.x,
            block_h: rect.h,
            block_w: rect.w,
            values: vec![0.0; rect.area()],
        }
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.origin_y, self.origin_x, self.block_h, self.block_w)
    }

    pub fn value(&self, by: usize, bx: usize) -> f32 {
        self.values[by * self.block_w + bx]
    }

    pub fn set_value(&mut self, by: usize, bx: usize, v: f32) {
        self.values[by * self.block_w + bx] = v;
    }
}

/// Traversal order of the block grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Traversal {
    #[default]
    RowMajor,
    ColMajor,
}

/// Block geometry: tiles of `block_h x block_w` covering a plane exactly,
/// edge tiles clipped to the plane. Default geometry is 32x32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    block_h: usize,
    block_w: usize,
    pub traversal: Traversal,
}

impl Default for BlockPlan {
    fn default() -> Self {
        BlockPlan::new(32, 32)
    }
}

impl BlockPlan {
    pub fn new(block_h: usize, block_w: usize) -> Self {
        assert!(block_h > 0 && block_w > 0, "block extents must be positive");
        BlockPlan { block_h, block_w, traversal: Traversal::RowMajor }
    }

    /// One block spanning the whole plane, whatever its size.
    pub fn full_plane() -> Self {
        BlockPlan { block_h: usize::MAX, block_w: usize::MAX, traversal: Traversal::RowMajor }
    }

    pub fn with_traversal(mut self, traversal: Traversal) -> Self {
        self.traversal = traversal;
        self
    }

    /// Nominal block extents clipped to a concrete plane; this is also the
    /// size of the largest block the plan produces on that plane.
    pub fn effective(&self, height: usize, width: usize) -> (usize, usize) {
        (self.block_h.min(height), self.block_w.min(width))
    }

    /// The tiling of an `height x width` plane, in traversal order. Tiles are
    /// pairwise disjoint and their union is the full plane.
    pub fn rects(&self, height: usize, width: usize) -> Vec<Rect> {
        let (bh, bw) = self.effective(height, width);
        let mut out = Vec::new();
        match self.traversal {
            Traversal::RowMajor => {
                for y in (0..height).step_by(bh) {
                    for x in (0..width).step_by(bw) {
                        out.push(Rect::new(y, x, bh.min(height - y), bw.min(width - x)));
                    }
                }
            }
            Traversal::ColMajor => {
                for x in (0..width).step_by(bw) {
                    for y in (0..height).step_by(bh) {
                        out.push(Rect::new(y, x, bh.min(height - y), bw.min(width - x)));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_extract() {
        let mut t = Tensor::zeros(1, 1, 1, BitWidth::B8);
        t.set(0, 0, 0, 5.0, Narrowing::RoundSaturate);
        let b = t.extract_block(0, Rect::new(0, 0, 1, 1)).unwrap();
        assert_eq!(b.values, vec![5.0]);
    }

    #[test]
    fn extract_insert_round_trip() {
        let mut t = Tensor::zeros(6, 7, 2, BitWidth::B8);
        for y in 0..6 {
            for x in 0..7 {
                t.set(1, y, x, ((y * 7 + x) % 256) as f32, Narrowing::RoundSaturate);
            }
        }
        let rect = Rect::new(1, 2, 3, 4);
        let b = t.extract_block(1, rect).unwrap();
        let mut z = Tensor::zeros(6, 7, 2, BitWidth::B8);
        z.insert_block(&b, Narrowing::RoundSaturate).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                let inside = (1..4).contains(&y) && (2..6).contains(&x);
                let expect = if inside { t.get(1, y, x) } else { 0.0 };
                assert_eq!(z.get(1, y, x), expect, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn insert_zero_block_leaves_zero_tensor() {
        let mut t = Tensor::zeros(3, 3, 1, BitWidth::B2);
        let b = Block::zeros(0, Rect::new(0, 0, 3, 3));
        let before = t.clone();
        t.insert_block(&b, Narrowing::RoundSaturate).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn narrowing_saturates_at_max_code() {
        let mut t = Tensor::zeros(1, 1, 1, BitWidth::B2);
        t.set(0, 0, 0, 7.0, Narrowing::RoundSaturate);
        assert_eq!(t.get(0, 0, 0), 3.0);
        t.set(0, 0, 0, -2.0, Narrowing::RoundSaturate);
        assert_eq!(t.get(0, 0, 0), 0.0);
    }

    #[test]
    fn bounds_errors() {
        let t = Tensor::zeros(4, 4, 2, BitWidth::B8);
        assert!(matches!(
            t.extract_block(2, Rect::new(0, 0, 1, 1)),
            Err(Error::ChannelOutOfRange { .. })
        ));
        assert!(matches!(
            t.extract_block(0, Rect::new(3, 3, 2, 2)),
            Err(Error::RegionOutOfBounds { .. })
        ));
    }

    #[test]
    fn narrowing_rule_must_match_bits() {
        let mut t = Tensor::zeros(2, 2, 1, BitWidth::B32);
        let b = Block::zeros(0, Rect::new(0, 0, 2, 2));
        assert!(matches!(
            t.insert_block(&b, Narrowing::RoundSaturate),
            Err(Error::InvalidNarrowing { .. })
        ));
    }

    #[test]
    fn pack_round_trip_all_codes() {
        // Every representable code survives a write/read cycle, at every
        // packing offset within a byte.
        for bits in [BitWidth::B2, BitWidth::B8] {
            let max = bits.max_code();
            let mut t = Tensor::zeros(2, (max + 1) as usize + 3, 1, bits);
            for code in 0..=max {
                for offset in 0..4 {
                    t.set(0, 1, code as usize + offset, code as f32, Narrowing::RoundSaturate);
                    assert_eq!(t.get(0, 1, code as usize + offset), code as f32);
                }
            }
        }
        let mut t = Tensor::zeros(1, 3, 1, BitWidth::B32);
        for (x, v) in [(0usize, -1.25f32), (1, 0.0), (2, 3.5e-9)] {
            t.set(0, 0, x, v, Narrowing::Store32);
        }
        assert_eq!(t.get(0, 0, 0), -1.25);
        assert_eq!(t.get(0, 0, 2), 3.5e-9);
    }

    #[test]
    fn storage_length_matches_shape_rule() {
        // bits < 8: channels * height * ceil(width * bits / 8)
        let t = Tensor::zeros(5, 9, 3, BitWidth::B2);
        assert_eq!(t.data().len(), 3 * 5 * 3);
        let t = Tensor::zeros(5, 9, 3, BitWidth::B8);
        assert_eq!(t.data().len(), 3 * 5 * 9);
        let t = Tensor::zeros(5, 9, 3, BitWidth::B32);
        assert_eq!(t.data().len(), 3 * 5 * 9 * 4);
    }

    #[test]
    fn snapshot_round_trip_and_golden_header() {
        let mut t = Tensor::zeros(2, 3, 1, BitWidth::B2);
        t.set(0, 0, 0, 1.0, Narrowing::RoundSaturate);
        t.set(0, 1, 2, 3.0, Narrowing::RoundSaturate);
        let mut buf = Vec::new();
        t.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CNFM");
        assert_eq!(buf[4..8], 1u32.to_le_bytes());
        assert_eq!(buf[8..12], 2u32.to_le_bytes());
        assert_eq!(buf[12..16], 3u32.to_le_bytes());
        assert_eq!(buf[16..20], 1u32.to_le_bytes());
        assert_eq!(buf[20..24], 2u32.to_le_bytes());
        let back = Tensor::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        // Truncated payload surfaces as a format error.
        let cut = &buf[..buf.len() - 1];
        assert!(matches!(
            Tensor::read_snapshot(&mut &cut[..]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn block_plan_tiles_exactly() {
        let plan = BlockPlan::new(3, 4);
        let rects = plan.rects(7, 9);
        let mut covered = vec![vec![0u8; 9]; 7];
        for r in &rects {
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    covered[y][x] += 1;
                }
            }
        }
        assert!(covered.iter().flatten().all(|&c| c == 1));
        let full = BlockPlan::full_plane();
        assert_eq!(full.rects(7, 9), vec![Rect::new(0, 0, 7, 9)]);
    }

    #[test]
    fn disjoint_block_writes_commute() {
        let plan = BlockPlan::new(2, 2);
        let mut src = Tensor::zeros(4, 4, 1, BitWidth::B8);
        for y in 0..4 {
            for x in 0..4 {
                src.set(0, y, x, (y * 4 + x) as f32, Narrowing::RoundSaturate);
            }
        }
        let blocks: Vec<Block> =
            plan.rects(4, 4).into_iter().map(|r| src.extract_block(0, r).unwrap()).collect();
        let mut fwd = Tensor::zeros(4, 4, 1, BitWidth::B8);
        let mut rev = Tensor::zeros(4, 4, 1, BitWidth::B8);
        for b in &blocks {
            fwd.insert_block(b, Narrowing::RoundSaturate).unwrap();
        }
        for b in blocks.iter().rev() {
            rev.insert_block(b, Narrowing::RoundSaturate).unwrap();
        }
        assert_eq!(fwd, rev);
        assert_eq!(fwd, src);
    }

    proptest! {
        // Random block reassembly against the source tensor: concatenating
        // all blocks of any plan reconstructs the tensor exactly.
        #[test]
        fn plan_reassembly(seed in 0u64..1000, bh in 1usize..6, bw in 1usize..6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut src = Tensor::zeros(16, 16, 4, BitWidth::B8);
            for c in 0..4 {
                for y in 0..16 {
                    for x in 0..16 {
                        src.set(c, y, x, rng.gen_range(0..256) as f32, Narrowing::RoundSaturate);
                    }
                }
            }
            let plan = BlockPlan::new(bh, bw);
            let mut rebuilt = Tensor::zeros(16, 16, 4, BitWidth::B8);
            for c in 0..4 {
                for r in plan.rects(16, 16) {
                    let b = src.extract_block(c, r).unwrap();
                    rebuilt.insert_block(&b, Narrowing::RoundSaturate).unwrap();
                }
            }
            prop_assert_eq!(rebuilt, src);
        }

        // Random insert/extract sequences tracked against a dense f32 shadow
        // array.
        #[test]
        fn shadow_array_oracle(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w, c) = (8usize, 11usize, 3usize);
            let mut t = Tensor::zeros(h, w, c, BitWidth::B2);
            let mut shadow = vec![0.0f32; h * w * c];
            for _ in 0..40 {
                let ch = rng.gen_range(0..c);
                let bh = rng.gen_range(1..=h);
                let bw = rng.gen_range(1..=w);
                let y = rng.gen_range(0..=h - bh);
                let x = rng.gen_range(0..=w - bw);
                let rect = Rect::new(y, x, bh, bw);
                if rng.gen_bool(0.5) {
                    let mut b = Block::zeros(ch, rect);
                    for v in b.values.iter_mut() {
                        *v = rng.gen_range(-2.0..6.0);
                    }
                    t.insert_block(&b, Narrowing::RoundSaturate).unwrap();
                    for by in 0..bh {
                        for bx in 0..bw {
                            let v = b.value(by, bx);
                            let code = if v <= 0.0 { 0.0 } else { v.round().min(3.0) };
                            shadow[(ch * h + y + by) * w + x + bx] = code;
                        }
                    }
                } else {
                    let b = t.extract_block(ch, rect).unwrap();
                    for by in 0..bh {
                        for bx in 0..bw {
                            prop_assert_eq!(b.value(by, bx), shadow[(ch * h + y + by) * w + x + bx]);
                        }
                    }
                }
            }
        }
    }
}
