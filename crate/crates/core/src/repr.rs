//! Object-centric scene representation: each object is a pixel location `b`
//! plus a learned feature `f` extracted from a window around `b`, and a
//! decoder that paints a set of descriptors back into an image.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, Activation, CompositeSpec, GradCheckReport, Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::sim::{Raster, RasterMeta, Vec2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprConfig {
    /// Window side `W` in pixels.
    pub window: usize,
    /// Feature dimension `d`.
    pub feature_dim: usize,
    pub hidden: usize,
}

impl Default for ReprConfig {
    fn default() -> Self {
        ReprConfig {
            window: 16,
            feature_dim: 8,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectDescriptor {
    /// Continuous pixel location.
    pub b: Vec2,
    pub f: Vec<f64>,
}

/// `W × W × 3` window cut out of a raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl Patch {
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + c]
    }
}

fn window_origin(b: Vec2, w: usize) -> (i64, i64) {
    let half = (w / 2) as i64;
    (b.x.round() as i64 - half, b.y.round() as i64 - half)
}

/// Cuts the `w × w` window centered at the rounded location; pixels outside
/// the raster read as zero.
pub fn crop(raster: &Raster, b: Vec2, w: usize) -> Patch {
    let g = raster.size() as i64;
    let (x0, y0) = window_origin(b, w);
    let mut pixels = vec![0.0f32; w * w * 3];
    for i in 0..w as i64 {
        let y = y0 + i;
        if y < 0 || y >= g {
            continue;
        }
        for j in 0..w as i64 {
            let x = x0 + j;
            if x < 0 || x >= g {
                continue;
            }
            let src = ((y * g + x) * 3) as usize;
            let dst = ((i * w as i64 + j) * 3) as usize;
            pixels[dst..dst + 3].copy_from_slice(&raster.pixels[src..src + 3]);
        }
    }
    Patch { size: w, pixels }
}

/// Like [`crop`], but centered exactly at `b`: each patch pixel is the
/// bilinear interpolation of the raster at its continuous position. Equals
/// `crop` for integer `b`.
pub fn crop_subpixel(raster: &Raster, b: Vec2, w: usize) -> Patch {
    let g = raster.size() as i64;
    let at = |x: i64, y: i64, c: usize| -> f32 {
        if x < 0 || y < 0 || x >= g || y >= g {
            0.0
        } else {
            raster.pixels[((y * g + x) * 3) as usize + c]
        }
    };
    let half = (w / 2) as f64;
    let mut pixels = vec![0.0f32; w * w * 3];
    for i in 0..w {
        let v = b.y - half + i as f64;
        let y0 = v.floor();
        let fy = (v - y0) as f32;
        for j in 0..w {
            let u = b.x - half + j as f64;
            let x0 = u.floor();
            let fx = (u - x0) as f32;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - fx) + at(x0 + 1, y0, c) * fx;
                let bot = at(x0, y0 + 1, c) * (1.0 - fx) + at(x0 + 1, y0 + 1, c) * fx;
                pixels[(i * w + j) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Patch { size: w, pixels }
}

/// Writes a patch back at the window `crop` would read from.
pub fn paste(raster: &mut Raster, patch: &Patch, b: Vec2) {
    let g = raster.size() as i64;
    let w = patch.size as i64;
    let (x0, y0) = window_origin(b, patch.size);
    for i in 0..w {
        for j in 0..w {
            let (x, y) = (x0 + j, y0 + i);
            if x < 0 || y < 0 || x >= g || y >= g {
                continue;
            }
            let dst = ((y * g + x) * 3) as usize;
            let src = ((i * w + j) * 3) as usize;
            raster.pixels[dst..dst + 3].copy_from_slice(&patch.pixels[src..src + 3]);
        }
    }
}

/// Stacks patches into a `[M, W*W*3]` tensor.
pub fn patch_matrix(patches: &[Patch], w: usize) -> Tensor {
    let mut data = Vec::with_capacity(patches.len() * w * w * 3);
    for p in patches {
        data.extend(p.pixels.iter().map(|&v| v as f64));
    }
    Tensor::matrix(patches.len(), w * w * 3, data)
}

/// Encoder (window → feature) and decoder (feature → RGBA window).
#[derive(Clone, Debug)]
pub struct Repr {
    pub cfg: ReprConfig,
    pub grid: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Repr {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ReprConfig, grid: usize, rng: &mut R) -> Self {
        let w = cfg.window;
        let encoder = Mlp::new(
            store,
            "enc",
            &[w * w * 3, cfg.hidden, cfg.feature_dim],
            Activation::None,
            rng,
        );
        let decoder = Mlp::new(
            store,
            "dec",
            &[cfg.feature_dim, cfg.hidden, w * w * 4],
            Activation::Sigmoid,
            rng,
        );
        Repr {
            cfg,
            grid,
            encoder,
            decoder,
        }
    }

    /// `[M, W*W*3]` patches → `[M, d]` features.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        self.encoder.forward(tape, store, patches)
    }

    /// Decodes `[M, d]` features and composites them at `[M, 2]` pixel
    /// locations onto `scenes` black canvases; row `k` lands on canvas
    /// `scene_of[k]`. Output `[scenes, G*G*3]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feats: Var,
        locs: Var,
        scene_of: Vec<usize>,
        scenes: usize,
    ) -> Result<Var> {
        let rgba = self.decoder.forward(tape, store, feats)?;
        let spec = CompositeSpec {
            canvas: self.grid,
            patch: self.cfg.window,
            scenes,
            scene_of,
        };
        tape.composite(rgba, locs, Arc::new(spec))
    }

    pub fn encode_patches(&self, store: &ParamStore, patches: &[Patch]) -> Result<Vec<Vec<f64>>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(patch_matrix(patches, self.cfg.window));
        let f = self.encode(&mut tape, store, x)?;
        let t = tape.value(f);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    /// Descriptors for objects at the given pixel locations of `raster`.
    pub fn describe(&self, store: &ParamStore, raster: &Raster, locs: &[Vec2]) -> Result<Vec<ObjectDescriptor>> {
        let patches: Vec<Patch> = locs.iter().map(|&b| crop(raster, b, self.cfg.window)).collect();
        let feats = self.encode_patches(store, &patches)?;
        Ok(locs
            .iter()
            .zip(feats)
            .map(|(&b, f)| ObjectDescriptor { b, f })
            .collect())
    }

    pub fn decode_scene(&self, store: &ParamStore, descs: &[ObjectDescriptor], meta: RasterMeta) -> Result<Raster> {
        if descs.is_empty() {
            return Ok(Raster::zeros(meta));
        }
        let d = self.cfg.feature_dim;
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::matrix(
            descs.len(),
            d,
            descs.iter().flat_map(|x| x.f.iter().copied()).collect(),
        ));
        let b = tape.constant(Tensor::matrix(
            descs.len(),
            2,
            descs.iter().flat_map(|x| [x.b.x, x.b.y]).collect(),
        ));
        let img = self.decode(&mut tape, store, f, b, vec![0; descs.len()], 1)?;
        Ok(Raster {
            meta,
            pixels: tape.value(img).data().iter().map(|&v| v as f32).collect(),
        })
    }
}

fn tiny_repr(seed: u64) -> (ParamStore, Repr, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = ReprConfig {
        window: 6,
        feature_dim: 3,
        hidden: 8,
    };
    let repr = Repr::new(&mut store, cfg, 12, &mut rng);
    (store, repr, rng)
}

/// Finite-difference check of every encoder weight on a small random
/// instance; the loss is a squared error on the encoded features.
pub fn check_encoder_gradients(seed: u64) -> Result<GradCheckReport> {
    let (mut store, repr, mut rng) = tiny_repr(seed);
    let patches: Vec<f64> = (0..2 * 108).map(|_| rng.random_range(0.0..1.0)).collect();
    let target: Vec<f64> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    gradient_check(&mut store, usize::MAX, 1e-5, &mut rng, |t, s| {
        let p = t.constant(Tensor::matrix(2, 108, patches.clone()));
        let f = repr.encode(t, s, p)?;
        let y = t.constant(Tensor::matrix(2, 3, target.clone()));
        t.mse(f, y)
    })
}

/// Same for the decoder, through compositing at fractional locations.
pub fn check_decoder_gradients(seed: u64) -> Result<GradCheckReport> {
    let (mut store, repr, mut rng) = tiny_repr(seed);
    let feats: Vec<f64> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..12 * 12 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    gradient_check(&mut store, usize::MAX, 1e-5, &mut rng, |t, s| {
        let f = t.constant(Tensor::matrix(2, 3, feats.clone()));
        let b = t.constant(Tensor::matrix(2, 2, vec![4.3, 5.1, 7.6, 6.2]));
        let img = repr.decode(t, s, f, b, vec![0, 0], 1)?;
        let y = t.constant(Tensor::matrix(1, 432, target.clone()));
        t.mse(img, y)
    })
}

/// Raster as a `[1, G*G*3]` row.
pub fn raster_row(r: &Raster) -> Vec<f64> {
    r.pixels.iter().map(|&v| v as f64).collect()
}
