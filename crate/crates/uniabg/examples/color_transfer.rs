//! Recolors a drone-style image toward satellite color statistics in the
//! decorrelated log-LMS (l-alpha-beta) space, writing before/after PPM files
//! into a temporary directory. Run with:
//!
//! ```text
//! cargo run --example color_transfer
//! ```

use uniabg::apv::{color_transfer, lab_stats, rgb_to_lab, write_ppm, RasterImage};

/// A small procedural image with a strong warm cast, standing in for a drone
/// photograph.
fn warm_image() -> RasterImage {
    let size = 48usize;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let base = (((x / 6) + (y / 6)) % 2) as i32 * 90 + 70;
            pixels.push((base + 60).clamp(0, 255) as u8); // strong red
            pixels.push((base + 15).clamp(0, 255) as u8);
            pixels.push((base - 40).clamp(0, 255) as u8); // weak blue
        }
    }
    RasterImage::new(size, size, pixels).unwrap()
}

/// A cool, low-contrast image, standing in for the satellite target style.
fn cool_image() -> RasterImage {
    let size = 48usize;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let base = ((x * 2 + y) % 48) as i32 + 100;
            pixels.push((base - 35).clamp(0, 255) as u8);
            pixels.push(base.clamp(0, 255) as u8);
            pixels.push((base + 45).clamp(0, 255) as u8);
        }
    }
    RasterImage::new(size, size, pixels).unwrap()
}

fn print_stats(label: &str, image: &RasterImage) {
    let stats = lab_stats(&rgb_to_lab(image));
    println!(
        "{label}: mean [{:+.3} {:+.3} {:+.3}], std [{:.3} {:.3} {:.3}]",
        stats.mean[0], stats.mean[1], stats.mean[2], stats.std[0], stats.std[1], stats.std[2]
    );
}

fn main() -> uniabg::Result<()> {
    let source = warm_image();
    let target = cool_image();
    let target_stats = lab_stats(&rgb_to_lab(&target));

    let transferred = color_transfer(&source, &target_stats)?;

    print_stats("source ", &source);
    print_stats("target ", &target);
    print_stats("result ", &transferred);

    let dir = std::env::temp_dir().join("uniabg_color_transfer");
    std::fs::create_dir_all(&dir).map_err(|e| uniabg::Error::io(dir.display().to_string(), e))?;
    write_ppm(&source, &dir.join("source.ppm"))?;
    write_ppm(&target, &dir.join("target.ppm"))?;
    write_ppm(&transferred, &dir.join("result.ppm"))?;
    println!("wrote PPM files to {}", dir.display());
    Ok(())
}
