//! Writes the small synthetic evaluation set used by tests and demos.
//!
//! Usage: `cargo run -p forensic-core --example make_synthetic -- [OUT_DIR]`
//!
//! Each dataset holds three tampered images (smooth gradient background with
//! a pasted noise-textured patch) and one authentic gradient image.

use std::path::Path;

use forensic_core::tools::{ImageBuffer, MaskImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const W: u32 = 96;
const H: u32 = 64;

enum Shape {
    Rect(u32, u32, u32, u32),
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: u32, y: u32) -> bool {
        match *self {
            Shape::Rect(x1, y1, x2, y2) => x >= x1 && x < x2 && y >= y1 && y < y2,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn background(variant: u32) -> impl Fn(u32, u32) -> [u8; 3] {
    move |x, y| match variant % 3 {
        0 => [(x * 2) as u8, (y * 3) as u8, 128],
        1 => [90, (x + y) as u8, (200 - y) as u8],
        _ => [(40 + y * 2) as u8, 160, (x * 2) as u8],
    }
}

fn write(path: &Path, bytes: Vec<u8>) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data/synthetic".into());
    let out = Path::new(&out);
    let datasets: [(&str, [Shape; 3]); 2] = [
        (
            "alpha",
            [
                Shape::Rect(20, 12, 44, 36),
                Shape::Ellipse { cx: 60.0, cy: 30.0, rx: 14.0, ry: 10.0 },
                Shape::Rect(8, 40, 30, 58),
            ],
        ),
        (
            "beta",
            [
                Shape::Ellipse { cx: 30.0, cy: 24.0, rx: 12.0, ry: 12.0 },
                Shape::Rect(50, 8, 86, 28),
                Shape::Ellipse { cx: 70.0, cy: 44.0, rx: 16.0, ry: 8.0 },
            ],
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (d, (name, shapes)) in datasets.iter().enumerate() {
        let dir = out.join(name);
        for (i, shape) in shapes.iter().enumerate() {
            let bg = background(d as u32 + i as u32);
            let noise: Vec<[u8; 3]> = (0..W * H).map(|_| rng.random()).collect();
            let img = ImageBuffer::from_fn(W, H, |x, y| {
                if shape.contains(x, y) {
                    noise[(y * W + x) as usize]
                } else {
                    bg(x, y)
                }
            });
            let mask = MaskImage::from_fn(W, H, |x, y| shape.contains(x, y));
            let id = format!("{name}-t{}", i + 1);
            write(&dir.join("images").join(format!("{id}.png")), img.encode_png().unwrap());
            write(&dir.join("masks").join(format!("{id}.png")), mask.encode_png().unwrap());
        }
        let img = ImageBuffer::from_fn(W, H, background(d as u32 + 1));
        write(&dir.join("authentic").join(format!("{name}-a1.png")), img.encode_png().unwrap());
    }
    println!("wrote {}", out.display());
}
