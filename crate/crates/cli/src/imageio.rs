use std::path::Path;

use mmfb::datamodel::{read_image_tensor, write_image_tensor, Image};
use mmfb::error::{Error, Result};

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a `.png` (8-bit RGB) or a raw `.f32t` image tensor.
pub fn read_image(path: &Path) -> Result<Image> {
    if !is_png(path) {
        return read_image_tensor(path);
    }
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, img.width() as u32, img.height() as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `<stem>.f32t` and `<stem>.png` into `dir`; returns both file names.
pub fn write_both(dir: &Path, stem: &str, img: &Image) -> Result<[String; 2]> {
    let t = format!("{stem}.f32t");
    let p = format!("{stem}.png");
    write_image_tensor(&dir.join(&t), img)?;
    write_png(&dir.join(&p), img)?;
    Ok([t, p])
}
