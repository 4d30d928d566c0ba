use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::codebook::{train_codebook, Codebook};
use crate::data::{Attributes, Color, Shape};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Small RGB raster with values in `[0, 1]`, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    attributes: Option<Attributes>,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, attributes: Option<Attributes>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "{height}x{width}x{CHANNELS} image cannot hold {} values",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            attributes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn attributes(&self) -> Option<&Attributes> {
        self.attributes.as_ref()
    }

    /// Binary portable pixmap (P6, 8-bit).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn mse(&self, other: &ToyImage) -> f64 {
        let n = self.pixels.len() as f64;
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n
    }
}

/// Image size and token grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    /// Square image side in pixels.
    pub side: usize,
    /// Pixel-token patch side; `0` disables pixel tokens.
    pub patch: usize,
    /// Semantic grid side (`grid x grid` tokens); `0` disables semantic tokens.
    pub sem_grid: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self {
            side: 24,
            patch: 4,
            sem_grid: 3,
        }
    }
}

impl ImageGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.patch > 0 && !self.side.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch {}",
                self.side, self.patch
            )));
        }
        if self.sem_grid > 0 && !self.side.is_multiple_of(self.sem_grid) {
            return Err(Error::Config(format!(
                "image side {} is not divisible by semantic grid {}",
                self.side, self.sem_grid
            )));
        }
        if self.sem_grid > 0 && !(self.side / self.sem_grid).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "semantic cell side {} must be even",
                self.side / self.sem_grid
            )));
        }
        if self.patch == 0 && self.sem_grid == 0 {
            return Err(Error::Config("an image needs semantic or pixel tokens".into()));
        }
        Ok(())
    }

    /// Pixel tokens per image.
    pub fn p(&self) -> usize {
        if self.patch == 0 {
            0
        } else {
            (self.side / self.patch).pow(2)
        }
    }

    /// Semantic tokens per image.
    pub fn s(&self) -> usize {
        self.sem_grid * self.sem_grid
    }

    pub fn pixel_grid(&self) -> (usize, usize) {
        if self.patch == 0 {
            (0, 0)
        } else {
            (self.side / self.patch, self.side / self.patch)
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

/// Flattens `patch x patch` tiles in row-major tile order, each tile row-major.
pub fn extract_patches(img: &ToyImage, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            img.height, img.width
        )));
    }
    let mut out = Vec::with_capacity(img.pixels.len());
    for ty in 0..img.height / patch {
        for tx in 0..img.width / patch {
            for y in 0..patch {
                let o = ((ty * patch + y) * img.width + tx * patch) * CHANNELS;
                out.extend_from_slice(&img.pixels[o..o + patch * CHANNELS]);
            }
        }
    }
    Ok(out)
}

/// Pixel ids of each patch, row-major.
pub fn encode_pixel(img: &ToyImage, cb: &Codebook, patch: usize) -> Result<Vec<u32>> {
    if cb.d() != patch * patch * CHANNELS {
        return Err(Error::Config(format!(
            "codebook width {} does not match {patch}x{patch} patches",
            cb.d()
        )));
    }
    let patches = extract_patches(img, patch)?;
    Ok(patches.chunks_exact(cb.d()).map(|p| cb.nearest(p)).collect())
}

/// Pastes codewords back into a `rows x cols` patch grid, clamped to `[0, 1]`.
pub fn decode_pixel(ids: &[u32], cb: &Codebook, grid: (usize, usize)) -> Result<ToyImage> {
    let (rows, cols) = grid;
    if ids.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} pixel ids for a {rows}x{cols} grid",
            ids.len()
        )));
    }
    let patch = ((cb.d() / CHANNELS) as f64).sqrt().round() as usize;
    if patch * patch * CHANNELS != cb.d() {
        return Err(Error::Config(format!("codebook width {} is not a square RGB patch", cb.d())));
    }
    let (h, w) = (rows * patch, cols * patch);
    let mut pixels = vec![0.0f32; h * w * CHANNELS];
    for (t, &id) in ids.iter().enumerate() {
        if id as usize >= cb.k() {
            return Err(Error::Index(format!("pixel id {id} outside codebook of {}", cb.k())));
        }
        let cw = cb.codeword(id as usize);
        let (ty, tx) = (t / cols, t % cols);
        for y in 0..patch {
            let o = ((ty * patch + y) * w + tx * patch) * CHANNELS;
            for (dst, &v) in pixels[o..o + patch * CHANNELS]
                .iter_mut()
                .zip(&cw[y * patch * CHANNELS..(y + 1) * patch * CHANNELS])
            {
                *dst = v.clamp(0.0, 1.0);
            }
        }
    }
    ToyImage::new(h, w, pixels, None)
}

/// Width of the attribute summary: one-hot shape then one-hot color.
const SUMMARY: usize = Shape::ALL.len() + Color::ALL.len();
/// Width of the projected attribute summary appended to pooled features.
pub const ATTR_PROJ: usize = 8;
/// Pooled pixel features per cell: a 2x2 average pool of each channel.
pub const POOLED: usize = 4 * CHANNELS;

/// Frozen random projection of the per-cell attribute summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticProjection {
    weights: Vec<f32>,
}

impl SemanticProjection {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (SUMMARY as f64).sqrt()).unwrap();
        Self {
            weights: (0..SUMMARY * ATTR_PROJ)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect(),
        }
    }

    pub fn from_weights(weights: Vec<f32>) -> Result<Self> {
        if weights.len() != SUMMARY * ATTR_PROJ {
            return Err(Error::Shape("semantic projection has wrong size".into()));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    fn project(&self, attrs: &Attributes, out: &mut [f32]) {
        let hot = [attrs.shape.index(), Shape::ALL.len() + attrs.color.index()];
        for (j, o) in out.iter_mut().enumerate() {
            *o = hot.iter().map(|&i| self.weights[i * ATTR_PROJ + j]).sum();
        }
    }
}

/// Per-cell semantic features over a `grid x grid` partition of the image.
pub fn semantic_features(img: &ToyImage, grid: usize, proj: &SemanticProjection) -> Result<Vec<f32>> {
    if grid == 0 || !img.height.is_multiple_of(grid) || !img.width.is_multiple_of(grid) {
        return Err(Error::Config(format!(
            "{}x{} image is not divisible by a {grid}x{grid} semantic grid",
            img.height, img.width
        )));
    }
    let (ch, cw) = (img.height / grid, img.width / grid);
    if ch % 2 != 0 || cw % 2 != 0 {
        return Err(Error::Config(format!("semantic cell {ch}x{cw} must have even sides")));
    }
    let dim = POOLED + ATTR_PROJ;
    let mut out = vec![0.0f32; grid * grid * dim];
    let bbox = img.attributes.map(|a| (a, a.bbox(img.width)));
    for gy in 0..grid {
        for gx in 0..grid {
            let f = &mut out[(gy * grid + gx) * dim..(gy * grid + gx + 1) * dim];
            let (hh, hw) = (ch / 2, cw / 2);
            for sy in 0..2 {
                for sx in 0..2 {
                    let mut acc = [0.0f64; CHANNELS];
                    for y in 0..hh {
                        for x in 0..hw {
                            let py = gy * ch + sy * hh + y;
                            let px = gx * cw + sx * hw + x;
                            let o = (py * img.width + px) * CHANNELS;
                            for c in 0..CHANNELS {
                                acc[c] += img.pixels[o + c] as f64;
                            }
                        }
                    }
                    for c in 0..CHANNELS {
                        f[(sy * 2 + sx) * CHANNELS + c] = (acc[c] / (hh * hw) as f64) as f32;
                    }
                }
            }
            if let Some((attrs, (x0, y0, size))) = bbox {
                let overlaps = x0 < (gx + 1) * cw && gx * cw < x0 + size && y0 < (gy + 1) * ch && gy * ch < y0 + size;
                if overlaps {
                    proj.project(&attrs, &mut f[POOLED..]);
                }
            }
        }
    }
    Ok(out)
}

/// Semantic ids per cell of a `grid x grid` partition, row-major.
pub fn encode_semantic(img: &ToyImage, cb: &Codebook, grid: usize, proj: &SemanticProjection) -> Result<Vec<u32>> {
    if cb.d() != POOLED + ATTR_PROJ {
        return Err(Error::Config(format!(
            "semantic codebook width {} does not match feature width {}",
            cb.d(),
            POOLED + ATTR_PROJ
        )));
    }
    let feats = semantic_features(img, grid, proj)?;
    Ok(feats.chunks_exact(cb.d()).map(|f| cb.nearest(f)).collect())
}

/// Pixel and semantic quantizers for one [`ImageGeometry`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokenizer {
    pub geometry: ImageGeometry,
    pub pixel: Option<Codebook>,
    pub semantic: Option<Codebook>,
    pub projection: SemanticProjection,
    /// Mean cell image per semantic code, used to decode semantic-only blocks.
    pub semantic_decoder: Option<Vec<f32>>,
}

/// Settings for fitting an [`ImageTokenizer`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub pixel_k: usize,
    pub semantic_k: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            pixel_k: 256,
            semantic_k: 64,
            kmeans_iters: 25,
            seed: 17,
        }
    }
}

impl ImageTokenizer {
    /// Fits both codebooks on `images`. `pixel` may be supplied to share one
    /// pixel codebook across geometries that differ only in the semantic grid.
    pub fn fit(
        geometry: ImageGeometry,
        cfg: &TokenizerConfig,
        images: &[ToyImage],
        pixel: Option<Codebook>,
    ) -> Result<Self> {
        geometry.validate()?;
        let projection = SemanticProjection::new(cfg.seed ^ 0x5e3a);
        let pixel = if geometry.patch == 0 {
            None
        } else if let Some(cb) = pixel {
            if cb.d() != geometry.patch_dim() {
                return Err(Error::Config("shared pixel codebook has wrong patch width".into()));
            }
            Some(cb)
        } else {
            let mut data = Vec::new();
            for img in images {
                data.extend(extract_patches(img, geometry.patch)?);
            }
            Some(train_codebook(&data, geometry.patch_dim(), cfg.pixel_k, cfg.kmeans_iters, cfg.seed)?.codebook)
        };
        let (semantic, semantic_decoder) = if geometry.sem_grid == 0 {
            (None, None)
        } else {
            let mut data = Vec::new();
            for img in images {
                data.extend(semantic_features(img, geometry.sem_grid, &projection)?);
            }
            let cb = train_codebook(
                &data,
                POOLED + ATTR_PROJ,
                cfg.semantic_k,
                cfg.kmeans_iters,
                cfg.seed.wrapping_add(1),
            )?
            .codebook;
            let dec = fit_semantic_decoder(&geometry, &cb, &projection, images)?;
            (Some(cb), Some(dec))
        };
        Ok(Self {
            geometry,
            pixel,
            semantic,
            projection,
            semantic_decoder,
        })
    }

    pub fn encode(&self, img: &ToyImage) -> Result<(Vec<u32>, Vec<u32>)> {
        let sem = match &self.semantic {
            Some(cb) => encode_semantic(img, cb, self.geometry.sem_grid, &self.projection)?,
            None => Vec::new(),
        };
        let pix = match &self.pixel {
            Some(cb) => encode_pixel(img, cb, self.geometry.patch)?,
            None => Vec::new(),
        };
        Ok((sem, pix))
    }

    /// Reconstructs an image from a block: from pixel ids when the geometry has
    /// them, otherwise through the per-code mean-cell decoder.
    pub fn decode(&self, sem: &[u32], pix: &[u32]) -> Result<ToyImage> {
        if let Some(cb) = &self.pixel {
            return decode_pixel(pix, cb, self.geometry.pixel_grid());
        }
        let (Some(cb), Some(dec)) = (&self.semantic, &self.semantic_decoder) else {
            return Err(Error::Config("tokenizer has no decoder".into()));
        };
        let g = self.geometry.sem_grid;
        if sem.len() != g * g {
            return Err(Error::Shape(format!("{} semantic ids for a {g}x{g} grid", sem.len())));
        }
        let side = self.geometry.side;
        let cell = side / g;
        let cell_len = cell * cell * CHANNELS;
        let mut pixels = vec![0.0f32; side * side * CHANNELS];
        for (t, &id) in sem.iter().enumerate() {
            if id as usize >= cb.k() {
                return Err(Error::Index(format!("semantic id {id} outside codebook")));
            }
            let src = &dec[id as usize * cell_len..(id as usize + 1) * cell_len];
            let (gy, gx) = (t / g, t % g);
            for y in 0..cell {
                let o = ((gy * cell + y) * side + gx * cell) * CHANNELS;
                pixels[o..o + cell * CHANNELS].copy_from_slice(&src[y * cell * CHANNELS..(y + 1) * cell * CHANNELS]);
            }
        }
        ToyImage::new(side, side, pixels, None)
    }
}

fn fit_semantic_decoder(
    geometry: &ImageGeometry,
    cb: &Codebook,
    proj: &SemanticProjection,
    images: &[ToyImage],
) -> Result<Vec<f32>> {
    let g = geometry.sem_grid;
    let cell = geometry.side / g;
    let cell_len = cell * cell * CHANNELS;
    let mut sums = vec![0.0f64; cb.k() * cell_len];
    let mut counts = vec![0usize; cb.k()];
    for img in images {
        let ids = encode_semantic(img, cb, g, proj)?;
        for (t, &id) in ids.iter().enumerate() {
            let (gy, gx) = (t / g, t % g);
            counts[id as usize] += 1;
            let dst = &mut sums[id as usize * cell_len..(id as usize + 1) * cell_len];
            for y in 0..cell {
                let o = ((gy * cell + y) * geometry.side + gx * cell) * CHANNELS;
                for (d, &v) in dst[y * cell * CHANNELS..(y + 1) * cell * CHANNELS]
                    .iter_mut()
                    .zip(&img.pixels()[o..o + cell * CHANNELS])
                {
                    *d += v as f64;
                }
            }
        }
    }
    Ok(sums
        .chunks_exact(cell_len)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |&v| if c == 0 { 0.0 } else { (v / c as f64) as f32 }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, render_blank, Position};
    use proptest::prelude::*;
    use rand::Rng;

    fn training_images() -> Vec<ToyImage> {
        let mut v = Vec::new();
        for bg in [0.0, 0.15, 0.3] {
            for a in Attributes::all() {
                v.push(render(&a, 24, bg).unwrap());
            }
        }
        v
    }

    fn tokenizer() -> &'static ImageTokenizer {
        static TOK: std::sync::OnceLock<ImageTokenizer> = std::sync::OnceLock::new();
        TOK.get_or_init(|| {
            ImageTokenizer::fit(ImageGeometry::default(), &TokenizerConfig::default(), &training_images(), None).unwrap()
        })
    }

    #[test]
    fn thirty_six_patches_from_default_geometry() {
        let img = render(&Attributes::from_index(5), 24, 0.0).unwrap();
        let ids = encode_pixel(&img, tokenizer().pixel.as_ref().unwrap(), 4).unwrap();
        assert_eq!(ids.len(), 36);
        let g = ImageGeometry { side: 16, patch: 4, sem_grid: 0 };
        assert_eq!(g.p(), 16);
    }

    #[test]
    fn indivisible_geometry_is_a_config_error() {
        let img = render(&Attributes::from_index(5), 24, 0.0).unwrap();
        let cb = Codebook::new(1, 5 * 5 * 3, vec![0.0; 75]).unwrap();
        assert!(matches!(encode_pixel(&img, &cb, 5), Err(Error::Config(_))));
        let g = ImageGeometry { side: 16, patch: 4, sem_grid: 3 };
        assert!(matches!(g.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_choice_matches_exhaustive_scan() {
        let cb = tokenizer().pixel.as_ref().unwrap();
        for i in (0..Attributes::COUNT).step_by(7) {
            let img = render(&Attributes::from_index(i), 24, 0.15).unwrap();
            let ids = encode_pixel(&img, cb, 4).unwrap();
            let patches = extract_patches(&img, 4).unwrap();
            for (p, &id) in patches.chunks_exact(cb.d()).zip(&ids) {
                let dists: Vec<f64> = (0..cb.k())
                    .map(|c| {
                        p.iter()
                            .zip(cb.codeword(c))
                            .map(|(&a, &b)| ((a - b) as f64).powi(2))
                            .sum()
                    })
                    .collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let first = dists.iter().position(|&d| d == min).unwrap();
                assert_eq!(id as usize, first);
            }
        }
    }

    #[test]
    fn codeword_images_are_fixed_points() {
        let cb = tokenizer().pixel.as_ref().unwrap();
        let ids: Vec<u32> = (0..36).map(|i| (i * 7 % cb.k()) as u32).collect();
        let img = decode_pixel(&ids, cb, (6, 6)).unwrap();
        let again = decode_pixel(&encode_pixel(&img, cb, 4).unwrap(), cb, (6, 6)).unwrap();
        assert_eq!(img.pixels(), again.pixels());
    }

    #[test]
    fn decode_same_id_tiles_one_patch() {
        let cb = tokenizer().pixel.as_ref().unwrap();
        let img = decode_pixel(&[3; 36], cb, (6, 6)).unwrap();
        let patches = extract_patches(&img, 4).unwrap();
        for p in patches.chunks_exact(cb.d()) {
            assert_eq!(p, &patches[..cb.d()]);
        }
    }

    #[test]
    fn decode_length_mismatch_is_a_shape_error() {
        let cb = tokenizer().pixel.as_ref().unwrap();
        assert!(matches!(decode_pixel(&[0; 35], cb, (6, 6)), Err(Error::Shape(_))));
    }

    #[test]
    fn reconstruction_error_within_training_error() {
        let imgs = training_images();
        let cb = tokenizer().pixel.as_ref().unwrap();
        let mut data = Vec::new();
        for img in &imgs {
            data.extend(extract_patches(img, 4).unwrap());
        }
        let train_err = cb.quantization_error(&data);
        let mse: f64 = imgs
            .iter()
            .map(|img| {
                let ids = encode_pixel(img, cb, 4).unwrap();
                decode_pixel(&ids, cb, (6, 6)).unwrap().mse(img)
            })
            .sum::<f64>()
            / imgs.len() as f64;
        assert!(mse <= train_err + 1e-6, "{mse} > {train_err}");
    }

    #[test]
    fn semantic_ids_ignore_subpool_noise() {
        let tok = tokenizer();
        let cb = tok.semantic.as_ref().unwrap();
        let a = Attributes::from_index(77);
        let clean = render(&a, 24, 0.15).unwrap();
        let mut noisy = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Zero-sum noise within each 2x2 pooling block keeps every pooled mean.
        for by in (0..24).step_by(4) {
            for bx in (0..24).step_by(4) {
                for c in 0..3 {
                    let eps: f32 = rng.random_range(-0.004..0.004);
                    let o1 = (by * 24 + bx) * 3 + c;
                    let o2 = ((by + 1) * 24 + bx + 1) * 3 + c;
                    noisy.pixels_mut()[o1] += eps;
                    noisy.pixels_mut()[o2] -= eps;
                }
            }
        }
        let a_ids = encode_semantic(&clean, cb, 3, &tok.projection).unwrap();
        let b_ids = encode_semantic(&noisy, cb, 3, &tok.projection).unwrap();
        assert_eq!(a_ids.len(), 9);
        assert_eq!(a_ids, b_ids);
    }

    #[test]
    fn blank_and_shape_images_differ_semantically() {
        let tok = tokenizer();
        let cb = tok.semantic.as_ref().unwrap();
        let blank = render_blank(24, 0.0).unwrap();
        let a = Attributes {
            shape: Shape::Square,
            color: Color::Red,
            position: Position(4),
        };
        let shaped = render(&a, 24, 0.0).unwrap();
        assert_ne!(
            encode_semantic(&blank, cb, 3, &tok.projection).unwrap(),
            encode_semantic(&shaped, cb, 3, &tok.projection).unwrap()
        );
    }

    #[test]
    fn encoding_is_deterministic() {
        let tok = tokenizer();
        let again = ImageTokenizer::fit(ImageGeometry::default(), &TokenizerConfig::default(), &training_images(), None).unwrap();
        assert_eq!(tok, &again);
        let img = render(&Attributes::from_index(100), 24, 0.3).unwrap();
        assert_eq!(tok.encode(&img).unwrap(), again.encode(&img).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decode_is_right_inverse_of_encode(ids in prop::collection::vec(0u32..256, 36)) {
            let cb = tokenizer().pixel.as_ref().unwrap();
            let img = decode_pixel(&ids, cb, (6, 6)).unwrap();
            prop_assert_eq!(encode_pixel(&img, cb, 4).unwrap(), ids);
        }

        #[test]
        fn encode_decode_encode_is_idempotent(i in 0usize..Attributes::COUNT, bg in 0usize..3) {
            let cb = tokenizer().pixel.as_ref().unwrap();
            let img = render(&Attributes::from_index(i), 24, [0.0, 0.15, 0.3][bg]).unwrap();
            let ids = encode_pixel(&img, cb, 4).unwrap();
            let again = encode_pixel(&decode_pixel(&ids, cb, (6, 6)).unwrap(), cb, 4).unwrap();
            prop_assert_eq!(ids, again);
        }
    }
}
