//! Grayscale PNG view of a fingerprint array.
//!
//! The bytes are laid out row-major in a `w × h` 8-bit image with
//! `w = ceil(sqrt(len))`, zero padded at the end. The unpadded length is
//! stored in a `tEXt` chunk under [`PAYLOAD_LEN_KEY`] so import can strip the
//! padding.

use super::CodecError;

pub const PAYLOAD_LEN_KEY: &str = "deltamask:payload-len";

pub fn image_dimensions(len: usize) -> (u32, u32) {
    if len == 0 {
        return (1, 1);
    }
    let mut w = (len as f64).sqrt().ceil() as usize;
    // Guard against sqrt rounding on perfect squares.
    while w > 1 && (w - 1) * (w - 1) >= len {
        w -= 1;
    }
    while w * w < len {
        w += 1;
    }
    let h = len.div_ceil(w);
    (w as u32, h as u32)
}

pub fn export_png(bytes: &[u8]) -> Result<Vec<u8>, CodecError> {
    let (w, h) = image_dimensions(bytes.len());
    let mut pixels = bytes.to_vec();
    pixels.resize(w as usize * h as usize, 0);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(PAYLOAD_LEN_KEY.to_string(), bytes.len().to_string())
            .map_err(|e| CodecError::Png(e.to_string()))?;
        let mut writer = enc
            .write_header()
            .map_err(|e| CodecError::Png(e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| CodecError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn import_png(png_bytes: &[u8]) -> Result<Vec<u8>, CodecError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(png_bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| CodecError::Png(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| CodecError::Png("image too large".into()))?
    ];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| CodecError::Png(e.to_string()))?;
    if frame.color_type != png::ColorType::Grayscale || frame.bit_depth != png::BitDepth::Eight {
        return Err(CodecError::Png("expected an 8-bit grayscale image".into()));
    }
    buf.truncate(frame.buffer_size());
    let len = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == PAYLOAD_LEN_KEY)
        .and_then(|t| t.text.parse::<usize>().ok())
        .ok_or_else(|| CodecError::Png(format!("missing {PAYLOAD_LEN_KEY} text chunk")))?;
    if len > buf.len() {
        return Err(CodecError::Png("payload length exceeds image size".into()));
    }
    buf.truncate(len);
    Ok(buf)
}
