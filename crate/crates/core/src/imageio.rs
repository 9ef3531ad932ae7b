//! PNG reading and writing for 8-bit RGB and 16-bit grayscale buffers.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

fn encode(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let fmt = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn write_rgb(path: &Path, image: &Grid<[u8; 3]>) -> Result<()> {
    let data: Vec<u8> = image.as_slice().iter().flatten().copied().collect();
    encode(
        path,
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &data,
    )
}

pub fn read_rgb(path: &Path) -> Result<Grid<[u8; 3]>> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit RGB", path.display())));
    }
    let pixels = buf.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Grid::from_vec(info.width as usize, info.height as usize, pixels))
}

pub fn write_u16(path: &Path, image: &Grid<u16>) -> Result<()> {
    let data: Vec<u8> = image.as_slice().iter().flat_map(|v| v.to_be_bytes()).collect();
    encode(
        path,
        image.width(),
        image.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
    )
}

pub fn read_u16(path: &Path) -> Result<Grid<u16>> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!("{}: expected 16-bit grayscale", path.display())));
    }
    let pixels = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Grid::from_vec(info.width as usize, info.height as usize, pixels))
}
