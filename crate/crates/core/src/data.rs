//! RefShapes: seeded scenes of colored shapes with templated referring
//! expressions, hard-rasterized masks, and the RFS1 container format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::TokenSeq;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const CANVAS: usize = 48;
pub const MAX_TOKENS: usize = 4;
pub const VOCAB_SIZE: usize = 11;
pub const MAGIC: &[u8; 4] = b"RFS1";

const MIN_RADIUS: i32 = 4;
const MAX_RADIUS: i32 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
pub const POSITIONS: [Position; 4] = [
    Position::Left,
    Position::Right,
    Position::Top,
    Position::Bottom,
];

/// One word of an expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Word {
    Color(Color),
    Shape(Shape),
    Position(Position),
}

impl Word {
    pub fn id(self) -> u16 {
        match self {
            Word::Color(c) => 1 + c as u16,
            Word::Shape(s) => 4 + s as u16,
            Word::Position(p) => 7 + p as u16,
        }
    }

    pub fn from_id(id: u16) -> Option<Self> {
        match id {
            1..=3 => Some(Word::Color(COLORS[id as usize - 1])),
            4..=6 => Some(Word::Shape(SHAPES[id as usize - 4])),
            7..=10 => Some(Word::Position(POSITIONS[id as usize - 7])),
            _ => None,
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Word::Color(Color::Red) => "red",
            Word::Color(Color::Green) => "green",
            Word::Color(Color::Blue) => "blue",
            Word::Shape(Shape::Square) => "square",
            Word::Shape(Shape::Circle) => "circle",
            Word::Shape(Shape::Triangle) => "triangle",
            Word::Position(Position::Left) => "left",
            Word::Position(Position::Right) => "right",
            Word::Position(Position::Top) => "top",
            Word::Position(Position::Bottom) => "bottom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cx: i32,
    pub cy: i32,
    pub radius: i32,
}

impl SceneObject {
    /// Hard membership test for pixel `(x, y)`.
    pub fn covers(&self, x: i32, y: i32) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        match self.shape {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            // apex (cx, cy − r), base row cy + r spanning cx ± r
            Shape::Triangle => 2 * dx.abs() <= dy + r,
        }
    }

    fn boxes_apart(&self, other: &SceneObject) -> bool {
        (self.cx - other.cx).abs() > self.radius + other.radius
            || (self.cy - other.cy).abs() > self.radius + other.radius
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Whether object `idx` is strictly extreme in the direction `pos`.
    pub fn holds(&self, idx: usize, pos: Position) -> bool {
        let o = &self.objects[idx];
        self.objects.iter().enumerate().all(|(j, p)| {
            j == idx
                || match pos {
                    Position::Left => o.cx < p.cx,
                    Position::Right => o.cx > p.cx,
                    Position::Top => o.cy < p.cy,
                    Position::Bottom => o.cy > p.cy,
                }
        })
    }

    pub fn satisfies(&self, idx: usize, word: Word) -> bool {
        let o = &self.objects[idx];
        match word {
            Word::Color(c) => o.color == c,
            Word::Shape(s) => o.shape == s,
            Word::Position(p) => self.holds(idx, p),
        }
    }

    /// Indices of objects matching every word.
    pub fn referents(&self, words: &[Word]) -> Vec<usize> {
        (0..self.objects.len())
            .filter(|&i| words.iter().all(|&w| self.satisfies(i, w)))
            .collect()
    }

    pub fn render(&self, height: usize, width: usize) -> Tensor<f32> {
        let mut data = vec![0f32; 3 * height * width];
        for o in &self.objects {
            let ch = o.color as usize;
            for y in 0..height {
                for x in 0..width {
                    if o.covers(x as i32, y as i32) {
                        data[(ch * height + y) * width + x] = 1.0;
                    }
                }
            }
        }
        Tensor::from_parts(vec![3, height, width], data)
    }

    pub fn rasterize(&self, idx: usize, height: usize, width: usize) -> BinaryMask {
        let o = self.objects[idx];
        BinaryMask::from_fn(height, width, |y, x| o.covers(x as i32, y as i32))
    }
}

/// Shortest "[position] [color] [shape]" description of `target`, dropping
/// attributes greedily (position first) while exactly one object still
/// matches. `None` when no template singles the target out.
pub fn describe<R: Rng>(scene: &Scene, target: usize, rng: &mut R) -> Option<Vec<Word>> {
    let o = scene.objects[target];
    let applicable: Vec<Position> = POSITIONS
        .iter()
        .copied()
        .filter(|&p| scene.holds(target, p))
        .collect();
    let mut words = Vec::with_capacity(3);
    if !applicable.is_empty() {
        words.push(Word::Position(
            applicable[rng.gen_range(0..applicable.len())],
        ));
    }
    words.push(Word::Color(o.color));
    words.push(Word::Shape(o.shape));
    if scene.referents(&words) != [target] {
        return None;
    }
    let mut i = 0;
    while i < words.len() {
        if words.len() == 1 {
            break;
        }
        let mut trial = words.clone();
        trial.remove(i);
        if scene.referents(&trial) == [target] {
            words = trial;
        } else {
            i += 1;
        }
    }
    Some(words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub tokens: TokenSeq,
    pub gt: BinaryMask,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn words(&self) -> Vec<Word> {
        self.tokens
            .live()
            .iter()
            .filter_map(|&id| Word::from_id(id))
            .collect()
    }

    pub fn expression(&self) -> String {
        self.words()
            .iter()
            .map(|w| w.text())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn encoded_len(&self) -> usize {
        8 + 4 * self.image.numel() + self.gt.bits().len() + 2 * MAX_TOKENS + 2
    }
}

/// A sample along with the scene that produced it.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub scene: Scene,
    pub target: usize,
}

fn draw_scene<R: Rng>(rng: &mut R) -> Option<Scene> {
    let count = rng.gen_range(2..=4);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    'place: for _ in 0..count {
        for _attempt in 0..64 {
            let radius = rng.gen_range(MIN_RADIUS..=MAX_RADIUS);
            let hi = CANVAS as i32 - 1 - radius;
            let cand = SceneObject {
                shape: SHAPES[rng.gen_range(0..3)],
                color: COLORS[rng.gen_range(0..3)],
                cx: rng.gen_range(radius..=hi),
                cy: rng.gen_range(radius..=hi),
                radius,
            };
            if objects.iter().all(|o| o.boxes_apart(&cand)) {
                objects.push(cand);
                continue 'place;
            }
        }
        return None;
    }
    Some(Scene { objects })
}

pub fn generate_with_scene(seed: u64) -> GeneratedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let Some(scene) = draw_scene(&mut rng) else {
            continue;
        };
        let target = rng.gen_range(0..scene.objects.len());
        let Some(words) = describe(&scene, target, &mut rng) else {
            continue;
        };
        let ids: Vec<u16> = words.iter().map(|w| w.id()).collect();
        let tokens = TokenSeq::padded(&ids, MAX_TOKENS).expect("at most three words");
        let sample = Sample {
            image: scene.render(CANVAS, CANVAS),
            tokens,
            gt: scene.rasterize(target, CANVAS, CANVAS),
        };
        return GeneratedSample {
            sample,
            scene,
            target,
        };
    }
}

pub fn generate_sample(seed: u64) -> Sample {
    generate_with_scene(seed).sample
}

/// Samples for seeds `seed..seed + count`.
pub fn generate_dataset(seed: u64, count: usize) -> Vec<Sample> {
    (0..count as u64)
        .map(|i| generate_sample(seed + i))
        .collect()
}

/// Byte size of an RFS1 file holding `count` samples of `h×w`.
pub fn encoded_size(count: usize, h: usize, w: usize) -> usize {
    8 + count * (8 + 3 * h * w * 4 + h * w + 2 * MAX_TOKENS + 2)
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let total: usize = 8 + samples.iter().map(Sample::encoded_len).sum::<usize>();
    let mut buf = Vec::with_capacity(total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        if s.tokens.len() != MAX_TOKENS {
            return Err(Error::Contract(format!(
                "RFS1 stores exactly {MAX_TOKENS} tokens, sample has {}",
                s.tokens.len()
            )));
        }
        buf.extend_from_slice(&(s.height() as u32).to_le_bytes());
        buf.extend_from_slice(&(s.width() as u32).to_le_bytes());
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(s.gt.bits());
        for id in s.tokens.ids() {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        buf.extend_from_slice(&(s.tokens.valid() as u16).to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn err(&self, at: usize, reason: String) -> Error {
        Error::Format {
            offset: at as u64,
            reason,
        }
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.err(0, format!("bad magic {magic:?}, expected \"RFS1\"")));
    }
    let count = r.u32("sample count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        if h == 0 || w == 0 {
            return Err(r.err(at, format!("empty sample extent {h}x{w}")));
        }
        let n = 3 * h * w;
        let raw = r.take(4 * n, "image payload")?;
        let pixels = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let image = Tensor::new(&[3, h, w], pixels)?;
        let at = r.pos;
        let bits = r.take(h * w, "mask payload")?.to_vec();
        let gt = BinaryMask::new(h, w, bits).map_err(|e| r.err(at, e.to_string()))?;
        let at = r.pos;
        let mut ids = Vec::with_capacity(MAX_TOKENS);
        for _ in 0..MAX_TOKENS {
            ids.push(r.u16("token id")?);
        }
        let valid = r.u16("valid count")? as usize;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(r.err(at, format!("token id {bad} outside vocabulary")));
        }
        let tokens = TokenSeq::new(ids, valid).map_err(|e| r.err(at, e.to_string()))?;
        out.push(Sample { image, tokens, gt });
    }
    if r.pos != buf.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape {
            shape: vec![height, width],
            reason: format!("{} pixels", pixels.len()),
        });
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                reason: "truncated PGM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = |reason: &str| Error::Format {
        offset: 0,
        reason: reason.to_string(),
    };
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected a P5 PGM with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad PGM width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad PGM height"))?;
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format {
        offset: pos as u64,
        reason: "truncated PGM payload".into(),
    })?;
    Ok((w, h, pixels.to_vec()))
}

pub fn mask_to_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let px: Vec<u8> = mask.bits().iter().map(|&b| b * 255).collect();
    write_pgm(path, mask.width(), mask.height(), &px)
}

/// Writes one grayscale PGM per color channel: `<stem>_r.pgm`, `_g`, `_b`.
pub fn image_to_pgms(image: &Tensor<f32>, dir: &Path, stem: &str) -> Result<()> {
    let (c, h, w) = image.dims3("image_to_pgms")?;
    for (ch, suffix) in (0..c).zip(["r", "g", "b"]) {
        let px: Vec<u8> = image.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_pgm(&dir.join(format!("{stem}_{suffix}.pgm")), w, h, &px)?;
    }
    Ok(())
}
