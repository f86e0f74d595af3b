//! PNG encoding of depth maps (16-bit gray) and label images (8-bit gray).

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::cloud::DepthImage;
use crate::error::{Error, Result};

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthImage<u16>> {
    let (width, height, depth, color, buf) = decode(Cursor::new(bytes))?;
    if color != ColorType::Grayscale {
        return Err(Error::InvalidInput(format!(
            "depth PNG must be single-channel grayscale, got {color:?}"
        )));
    }
    let data = match depth {
        BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        BitDepth::Eight => buf.iter().map(|&b| b as u16).collect(),
        other => {
            return Err(Error::InvalidInput(format!(
                "unsupported depth PNG bit depth {other:?}"
            )))
        }
    };
    DepthImage::new(width, height, data)
}

pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthImage<u16>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth_png(&bytes)
}

pub fn write_depth_png(path: impl AsRef<Path>, image: &DepthImage<u16>) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write(path.as_ref(), image.width, image.height, BitDepth::Sixteen, &bytes)
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<DepthImage<u8>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (width, height, depth, color, buf) = decode(BufReader::new(file))?;
    if color != ColorType::Grayscale || depth != BitDepth::Eight {
        return Err(Error::InvalidInput(format!(
            "label PNG must be 8-bit grayscale, got {color:?}/{depth:?}"
        )));
    }
    DepthImage::new(width, height, buf)
}

pub fn write_label_png(path: impl AsRef<Path>, image: &DepthImage<u8>) -> Result<()> {
    write(path.as_ref(), image.width, image.height, BitDepth::Eight, &image.data)
}

fn decode<R: std::io::BufRead + std::io::Seek>(
    reader: R,
) -> Result<(usize, usize, BitDepth, ColorType, Vec<u8>)> {
    let decoder = png::Decoder::new(reader);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::InvalidInput("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.bit_depth,
        info.color_type,
        buf,
    ))
}

fn write(path: &Path, width: usize, height: usize, depth: BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(ColorType::Grayscale);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}
