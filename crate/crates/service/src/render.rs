//! PNG rendering of images and query overlays.

use std::io::Cursor;

use alc_core::model::Superpixel;
use image::{ImageBuffer, ImageFormat, Rgb, Rgba};

const MASK: Rgba<u8> = Rgba([0, 200, 80, 110]);
const STAR: Rgba<u8> = Rgba([255, 230, 0, 255]);

pub fn rgb_png(rgb: &[u8], width: u32, height: u32) -> Vec<u8> {
    let img: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(width, height, rgb.to_vec()).expect("rgb buffer matches its dimensions");
    encode(img)
}

/// Transparent canvas with the segment tinted and a cross marking the
/// representative pixel.
pub fn overlay_png(segment: &Superpixel, height: u32, rep: (u32, u32)) -> Vec<u8> {
    let width = segment.width;
    let mut img = ImageBuffer::from_pixel(width, height, Rgba([0, 0, 0, 0]));
    for &i in &segment.pixels {
        img.put_pixel(i % width, i / width, MASK);
    }
    let (rx, ry) = (rep.0 as i64, rep.1 as i64);
    for d in -2i64..=2 {
        for (x, y) in [(rx + d, ry), (rx, ry + d)] {
            if (0..width as i64).contains(&x) && (0..height as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, STAR);
            }
        }
    }
    encode(img)
}

fn encode<P: image::PixelWithColorType<Subpixel = u8>>(img: ImageBuffer<P, Vec<u8>>) -> Vec<u8>
where
    [P::Subpixel]: image::EncodableLayout,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding into memory");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_marks_segment_and_star() {
        let sp = Superpixel {
            image_id: "a".into(),
            segment_id: 0,
            width: 4,
            pixels: vec![0, 1, 4, 5],
        };
        let png = overlay_png(&sp, 3, (1, 1));
        let img = image::load_from_memory(&png).unwrap().to_rgba8();
        assert_eq!(img.dimensions(), (4, 3));
        assert_eq!(*img.get_pixel(0, 0), MASK);
        assert_eq!(*img.get_pixel(1, 1), STAR);
        assert_eq!(*img.get_pixel(3, 1), STAR);
        assert_eq!(img.get_pixel(3, 2)[3], 0);
    }

    #[test]
    fn rgb_round_trips() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| v as u8 * 10).collect();
        let img = image::load_from_memory(&rgb_png(&rgb, 3, 2)).unwrap().to_rgb8();
        assert_eq!(img.into_raw(), rgb);
    }
}
