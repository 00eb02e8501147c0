//! Burn detection boxes and score labels into an image tensor.

use tdid_core::postprocess::Detection;
use tdid_core::Tensor;

/// Pure red, chosen to stand out against muted scene backgrounds and to
/// survive 8-bit quantization exactly.
const INK: [f32; 3] = [1.0, 0.0, 0.0];

/// 3x5 bitmap glyphs for the score label, one row per byte, low three bits
/// used left-to-right.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0b111, 0b111, 0b111, 0b111, 0b111],
    }
}

fn put(image: &mut Tensor<f32>, r: i64, c: i64) {
    let (_, _, h, w) = image.dims4().expect("drawing needs an image tensor");
    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
        return;
    }
    let (r, c) = (r as usize, c as usize);
    let plane = h * w;
    for (ch, ink) in INK.iter().enumerate() {
        image.data_mut()[ch * plane + r * w + c] = *ink;
    }
}

fn rect_outline(image: &mut Tensor<f32>, x1: i64, y1: i64, x2: i64, y2: i64) {
    for x in x1..=x2 {
        put(image, y1, x);
        put(image, y2, x);
    }
    for y in y1..=y2 {
        put(image, y, x1);
        put(image, y, x2);
    }
}

fn text(image: &mut Tensor<f32>, label: &str, top: i64, left: i64) {
    let mut x = left;
    for c in label.chars() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3 {
                if row >> (2 - dx) & 1 == 1 {
                    put(image, top + dy as i64, x + dx);
                }
            }
        }
        x += 4;
    }
}

/// Draw each detection as a red rectangle with its score printed above the
/// top-left corner (inside the box when there is no room above).
pub fn draw_detections(image: &mut Tensor<f32>, detections: &[Detection]) {
    for det in detections {
        let x1 = det.bbox.x1.round() as i64;
        let y1 = det.bbox.y1.round() as i64;
        let x2 = (det.bbox.x2.round() as i64 - 1).max(x1);
        let y2 = (det.bbox.y2.round() as i64 - 1).max(y1);
        rect_outline(image, x1, y1, x2, y2);
        let label = format!("{:.2}", det.score);
        let top = if y1 >= 7 { y1 - 7 } else { y1 + 2 };
        text(image, &label, top, x1 + 1);
    }
}
