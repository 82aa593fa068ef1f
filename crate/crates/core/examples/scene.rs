//! Writes a seeded synthetic scene as PNG.
//!
//! ```text
//! cargo run -p dext-core --example scene -- 3 scene.png
//! ```

use dext_core::scene::{generate, SceneConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().unwrap_or_else(|| format!("scene-{seed}.png"));
    let scene = generate(&SceneConfig::default(), seed);
    std::fs::write(&out, scene.image.to_png().expect("png encodes")).expect("write png");
    for o in &scene.objects {
        let b = o.bbox;
        println!("class {} box [{:.3}, {:.3}, {:.3}, {:.3}]", o.class_id, b.x_min, b.y_min, b.x_max, b.y_max);
    }
}
