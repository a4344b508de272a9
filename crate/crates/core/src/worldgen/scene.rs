use serde::{Deserialize, Serialize};

use super::config::{GenConfig, LAYOUT_GRID};
use super::world::{Location, ObjectClass, WorldState};
use crate::error::{Error, Result};
use crate::maskgrid::PixelMask;
use crate::tensor_core::Rng;

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

const LAYOUT_STREAM: u64 = 3;
const FURNITURE_W: usize = 3;
const FURNITURE_H: usize = 2;

pub fn palette(class: ObjectClass) -> [u8; 3] {
    match class {
        ObjectClass::Microwave => [220, 40, 40],
        ObjectClass::Cabinet => [150, 90, 30],
        ObjectClass::Sink => [40, 90, 220],
        ObjectClass::Ashcan => [30, 30, 30],
        ObjectClass::Table => [230, 200, 60],
        ObjectClass::Jar => [60, 220, 220],
        ObjectClass::Cookie => [250, 130, 0],
        ObjectClass::Bread => [245, 225, 170],
        ObjectClass::Apple => [60, 200, 60],
        ObjectClass::Rag => [200, 60, 200],
        ObjectClass::Plate => [250, 250, 250],
        ObjectClass::Cup => [20, 20, 140],
    }
}

/// Half-open pixel rectangle `[y0,y1)×[x0,x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.y0 < o.y1 && o.y0 < self.y1 && self.x0 < o.x1 && o.x0 < self.x1
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub object: String,
    pub class: ObjectClass,
    pub rect: Rect,
}

/// RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        Image {
            height,
            width,
            pixels: color.repeat(height * width),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn fill(&mut self, r: &Rect, color: [u8; 3]) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let i = 3 * (y * self.width + x);
                self.pixels[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    /// Binary portable pixmap (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub images: Vec<Image>,
    /// Per image; furniture boxes precede the boxes of their contents.
    pub boxes: Vec<Vec<BoxRecord>>,
}

/// Draws every furniture piece into exactly one image as a patch-aligned
/// rectangle and every contained item as a smaller square nested inside its
/// container. Sibling rectangles never overlap.
pub fn rasterize(world: &WorldState, config: &GenConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let (size, m, cell) = (config.image_size, config.images, config.cell_px());
    let mut rng = Rng::new(seed).fork(LAYOUT_STREAM);
    let mut furniture: Vec<_> = world.objects.iter().filter(|o| o.class.is_furniture()).collect();
    rng.shuffle(&mut furniture);

    let mut scene = Scene {
        images: vec![Image::filled(size, size, BACKGROUND); m],
        boxes: vec![Vec::new(); m],
    };
    for img in 0..m {
        let here: Vec<_> = furniture.iter().skip(img).step_by(m).collect();
        let cells = place_furniture(here.len(), &mut rng).ok_or_else(|| {
            Error::Generation(format!("layout overflow: {} furniture pieces in one image", here.len()))
        })?;
        for (f, (cy, cx)) in here.iter().zip(cells) {
            let rect = Rect {
                y0: cy * cell,
                x0: cx * cell,
                y1: (cy + FURNITURE_H) * cell,
                x1: (cx + FURNITURE_W) * cell,
            };
            scene.images[img].fill(&rect, palette(f.class));
            scene.boxes[img].push(BoxRecord {
                object: f.id.clone(),
                class: f.class,
                rect,
            });
            let contents: Vec<_> = world.contents(&f.id).collect();
            let mut slots: Vec<(usize, usize)> = (0..FURNITURE_H)
                .flat_map(|r| (0..FURNITURE_W).map(move |c| (r, c)))
                .collect();
            if contents.len() > slots.len() {
                return Err(Error::Generation(format!(
                    "layout overflow: {} items inside {}",
                    contents.len(),
                    f.id
                )));
            }
            rng.shuffle(&mut slots);
            for (item, (r, c)) in contents.iter().zip(slots) {
                // Item squares leave a cell/8 rim of container colour.
                let y0 = (cy + r) * cell + cell / 8;
                let x0 = (cx + c) * cell + cell / 8;
                let rect = Rect {
                    y0,
                    x0,
                    y1: y0 + cell * 3 / 4,
                    x1: x0 + cell * 3 / 4,
                };
                scene.images[img].fill(&rect, palette(item.class));
                scene.boxes[img].push(BoxRecord {
                    object: item.id.clone(),
                    class: item.class,
                    rect,
                });
            }
        }
    }
    if let Some(o) = world.objects.iter().find(|o| o.location == Location::Held) {
        log::debug!("held object {} is not drawn", o.id);
    }
    Ok(scene)
}

/// Random non-overlapping top-left cells for `n` furniture rectangles.
fn place_furniture(n: usize, rng: &mut Rng) -> Option<Vec<(usize, usize)>> {
    const RESTARTS: usize = 64;
    const TRIES: usize = 64;
    for _ in 0..RESTARTS {
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(n);
        for _ in 0..n {
            let spot = (0..TRIES).find_map(|_| {
                let cy = rng.range(0, LAYOUT_GRID - FURNITURE_H + 1);
                let cx = rng.range(0, LAYOUT_GRID - FURNITURE_W + 1);
                let clear = placed.iter().all(|&(py, px)| {
                    cy + FURNITURE_H <= py
                        || py + FURNITURE_H <= cy
                        || cx + FURNITURE_W <= px
                        || px + FURNITURE_W <= cx
                });
                clear.then_some((cy, cx))
            });
            match spot {
                Some(s) => placed.push(s),
                None => break,
            }
        }
        if placed.len() == n {
            return Some(placed);
        }
    }
    None
}

/// Class names mentioned in `text`, matched as whole lowercase words.
pub fn mentioned_classes(text: &str) -> Vec<ObjectClass> {
    let mut out = Vec::new();
    for word in text.split(|c: char| !c.is_ascii_alphanumeric() && c != '_') {
        if let Some(c) = ObjectClass::from_name(word) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

/// Union of the boxes of every object whose class is named in `clause`, one
/// mask per image.
pub fn oracle_segment(scene: &Scene, clause: &str) -> Vec<PixelMask> {
    let classes = mentioned_classes(clause);
    scene
        .images
        .iter()
        .zip(&scene.boxes)
        .map(|(img, boxes)| {
            let mut mask = PixelMask::zeros(img.height, img.width);
            for b in boxes.iter().filter(|b| classes.contains(&b.class)) {
                mask.fill_rect(b.rect.y0, b.rect.x0, b.rect.y1, b.rect.x1);
            }
            mask
        })
        .collect()
}
