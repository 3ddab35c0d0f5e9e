//! 5x7 bitmap digits for frame-number labels.

pub const GLYPH_W: u32 = 5;
pub const GLYPH_H: u32 = 7;

/// Rows top to bottom; bit 4 is the leftmost column.
const DIGITS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

/// Pixel mask of `text` (digits only) at integer `scale`, one glyph column
/// of spacing between digits. Returns `(width, height, mask)` row-major.
pub fn render_digits(text: &str, scale: u32) -> (u32, u32, Vec<bool>) {
    let digits: Vec<usize> = text
        .chars()
        .filter_map(|c| c.to_digit(10).map(|d| d as usize))
        .collect();
    if digits.is_empty() {
        return (0, 0, Vec::new());
    }
    let n = digits.len() as u32;
    let w = (n * GLYPH_W + (n - 1)) * scale;
    let h = GLYPH_H * scale;
    let mut mask = vec![false; (w * h) as usize];
    for (k, d) in digits.iter().enumerate() {
        let x0 = k as u32 * (GLYPH_W + 1) * scale;
        for (row, bits) in DIGITS[*d].iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = x0 + col * scale + dx;
                        let y = row as u32 * scale + dy;
                        mask[(y * w + x) as usize] = true;
                    }
                }
            }
        }
    }
    (w, h, mask)
}
