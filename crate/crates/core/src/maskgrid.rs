//! Pixel masks, patch-grid weights and their OR aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary H×W mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl PixelMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("PixelMask::from_data", &[height, width], &[data.len()]));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::contract("pixel mask values must be 0 or 1"));
        }
        Ok(PixelMask { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v as u8;
    }

    /// Sets every pixel of the half-open rectangle `[y0,y1)×[x0,x1)`.
    pub fn fill_rect(&mut self, y0: usize, x0: usize, y1: usize, x1: usize) {
        for r in y0..y1.min(self.height) {
            for c in x0..x1.min(self.width) {
                self.data[r * self.width + c] = 1;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn or(&self, other: &PixelMask) -> Result<PixelMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(
                "PixelMask::or",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(PixelMask { data, ..*self })
    }

    /// Binary portable graymap (P5), 255 for set pixels.
    pub fn to_pgm(&self) -> Vec<u8> {
        pgm(self.width, self.height, &self.data)
    }
}

fn pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
    out
}

/// Binary P×P weights for each of `images` images, image-major then
/// row-major, which is also the global token order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWeights {
    side: usize,
    images: usize,
    data: Vec<u8>,
}

impl PatchWeights {
    pub fn zeros(side: usize, images: usize) -> Self {
        PatchWeights {
            side,
            images,
            data: vec![0; side * side * images],
        }
    }

    pub fn ones(side: usize, images: usize) -> Self {
        PatchWeights {
            side,
            images,
            data: vec![1; side * side * images],
        }
    }

    pub fn from_data(side: usize, images: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != side * side * images {
            return Err(Error::dim("PatchWeights::from_data", &[images, side, side], &[data.len()]));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::contract("patch weights must be 0 or 1"));
        }
        Ok(PatchWeights { side, images, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn tokens(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, image: usize, r: usize, c: usize) -> u8 {
        self.data[(image * self.side + r) * self.side + c]
    }

    pub fn image(&self, i: usize) -> PatchWeights {
        let n = self.side * self.side;
        PatchWeights {
            side: self.side,
            images: 1,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn live(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Concatenates single- or multi-image weights in order.
    pub fn concat(parts: &[PatchWeights]) -> Result<PatchWeights> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of no weights"))?;
        let mut data = Vec::new();
        let mut images = 0;
        for p in parts {
            if p.side != first.side {
                return Err(Error::dim("PatchWeights::concat", &[first.side], &[p.side]));
            }
            data.extend_from_slice(&p.data);
            images += p.images;
        }
        Ok(PatchWeights {
            side: first.side,
            images,
            data,
        })
    }

    /// One PGM per image.
    pub fn to_pgm(&self, image: usize) -> Vec<u8> {
        let n = self.side * self.side;
        pgm(self.side, self.side, &self.data[image * n..(image + 1) * n])
    }
}

/// Max-pools a pixel mask onto a P×P grid; H and W must be divisible by P.
pub fn pool_mask(mask: &PixelMask, p: usize) -> Result<PatchWeights> {
    if p == 0 || !mask.height.is_multiple_of(p) || !mask.width.is_multiple_of(p) {
        return Err(Error::config(format!(
            "image {}x{} is not divisible into a {p}x{p} patch grid",
            mask.height, mask.width
        )));
    }
    let (bh, bw) = (mask.height / p, mask.width / p);
    let mut out = PatchWeights::zeros(p, 1);
    for r in 0..mask.height {
        let row = &mask.data[r * mask.width..(r + 1) * mask.width];
        for (c, &v) in row.iter().enumerate() {
            if v != 0 {
                out.data[(r / bh) * p + c / bw] = 1;
            }
        }
    }
    Ok(out)
}

/// Elementwise OR of equally shaped weights.
pub fn aggregate_or(weights: &[PatchWeights]) -> Result<PatchWeights> {
    let first = weights
        .first()
        .ok_or_else(|| Error::contract("aggregate_or of an empty list"))?;
    let mut out = first.clone();
    for w in &weights[1..] {
        if (w.side, w.images) != (out.side, out.images) {
            return Err(Error::dim(
                "aggregate_or",
                &[out.images, out.side, out.side],
                &[w.images, w.side, w.side],
            ));
        }
        for (o, &v) in out.data.iter_mut().zip(&w.data) {
            *o |= v;
        }
    }
    Ok(out)
}

fn check_rectangular(per_clause: &[Vec<PatchWeights>]) -> Result<(usize, usize)> {
    let first = per_clause
        .first()
        .and_then(|img| img.first())
        .ok_or_else(|| Error::contract("mask aggregation needs at least one image and clause"))?;
    let n = per_clause[0].len();
    for (i, img) in per_clause.iter().enumerate() {
        if img.len() != n {
            return Err(Error::dim("clause masks per image", &[i, n], &[i, img.len()]));
        }
        for w in img {
            if w.side != first.side || w.images != 1 {
                return Err(Error::dim("clause mask", &[1, first.side], &[w.images, w.side]));
            }
        }
    }
    Ok((first.side, n))
}

/// Per image, OR over every clause; images concatenated in order.
/// `per_clause` is indexed `[image][clause]`.
pub fn build_global_mask(per_clause: &[Vec<PatchWeights>]) -> Result<PatchWeights> {
    check_rectangular(per_clause)?;
    let per_image = per_clause
        .iter()
        .map(|img| aggregate_or(img))
        .collect::<Result<Vec<_>>>()?;
    PatchWeights::concat(&per_image)
}

/// Per image, OR over the clauses in `ctrf`; all zeros when `ctrf` is empty.
pub fn build_ctrf_mask(per_clause: &[Vec<PatchWeights>], ctrf: &[usize]) -> Result<PatchWeights> {
    let (side, n) = check_rectangular(per_clause)?;
    if let Some(&bad) = ctrf.iter().find(|&&k| k >= n) {
        return Err(Error::contract(format!(
            "counterfactual clause index {bad} out of range for {n} clauses"
        )));
    }
    let per_image = per_clause
        .iter()
        .map(|img| {
            let mut out = PatchWeights::zeros(side, 1);
            for &k in ctrf {
                out = aggregate_or(&[out, img[k].clone()])?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    PatchWeights::concat(&per_image)
}
