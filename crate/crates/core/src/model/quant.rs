//! Q4B32: symmetric 4-bit block quantization with 32-element blocks.
//!
//! Each channel (one input column) is stored as `rows / 32` consecutive
//! blocks. A block is a little-endian `f32` absmax followed by 16 bytes of
//! packed codes (element `2i` in the low nibble, `2i + 1` in the high nibble,
//! biased by 8). The effective scale is `absmax / 7`, codes live in
//! `[-8, 7]`, and an element dequantizes to `code * absmax / 7`, evaluated in
//! `f64` so that `code = ±7` reproduces `±absmax` exactly.

pub const BLOCK: usize = 32;
pub const BLOCK_BYTES: usize = 4 + BLOCK / 2;

/// Bytes taken by one quantized channel of `rows` elements.
pub fn channel_bytes(rows: usize) -> usize {
    rows / BLOCK * BLOCK_BYTES
}

/// Quantizes one 32-element block into `out` (exactly `BLOCK_BYTES` long).
pub fn quantize_block(values: &[f32], out: &mut [u8]) {
    debug_assert_eq!(values.len(), BLOCK);
    debug_assert_eq!(out.len(), BLOCK_BYTES);
    let amax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    out[..4].copy_from_slice(&amax.to_le_bytes());
    for (pair, byte) in values.chunks_exact(2).zip(out[4..].iter_mut()) {
        let lo = encode(pair[0], amax);
        let hi = encode(pair[1], amax);
        *byte = lo | (hi << 4);
    }
}

fn encode(v: f32, amax: f32) -> u8 {
    if amax == 0.0 {
        return 8;
    }
    let code = (f64::from(v) * 7.0 / f64::from(amax)).round().clamp(-8.0, 7.0) as i8;
    (code + 8) as u8
}

/// Scale (`absmax / 7`) of a block.
pub fn block_scale(block: &[u8]) -> f32 {
    block_absmax(block) / 7.0
}

fn block_absmax(block: &[u8]) -> f32 {
    f32::from_le_bytes([block[0], block[1], block[2], block[3]])
}

/// Signed code of element `i` within a block.
pub fn block_code(block: &[u8], i: usize) -> i8 {
    let byte = block[4 + i / 2];
    let nibble = if i.is_multiple_of(2) { byte & 0x0f } else { byte >> 4 };
    nibble as i8 - 8
}

/// Dequantizes one block into `out` (32 values).
pub fn dequantize_block(block: &[u8], out: &mut [f32]) {
    let amax = f64::from(block_absmax(block));
    for (i, o) in out.iter_mut().enumerate().take(BLOCK) {
        *o = (f64::from(block_code(block, i)) * amax / 7.0) as f32;
    }
}

/// Quantizes a full channel of `rows` values.
pub fn quantize_channel(values: &[f32], out: &mut [u8]) {
    for (vals, block) in values.chunks_exact(BLOCK).zip(out.chunks_exact_mut(BLOCK_BYTES)) {
        quantize_block(vals, block);
    }
}

/// Dequantizes a full channel into `out`.
pub fn dequantize_channel(bytes: &[u8], out: &mut [f32]) {
    for (block, vals) in bytes.chunks_exact(BLOCK_BYTES).zip(out.chunks_exact_mut(BLOCK)) {
        dequantize_block(block, vals);
    }
}

/// `y += x * channel` for one quantized channel.
pub fn axpy_channel(y: &mut [f32], x: f32, bytes: &[u8]) {
    let mut vals = [0.0f32; BLOCK];
    for (block, ys) in bytes.chunks_exact(BLOCK_BYTES).zip(y.chunks_exact_mut(BLOCK)) {
        dequantize_block(block, &mut vals);
        for (yi, w) in ys.iter_mut().zip(vals.iter()) {
            *yi += x * w;
        }
    }
}
