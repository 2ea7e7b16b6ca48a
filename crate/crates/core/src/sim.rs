//! Quasi-static 2D pushing world: disc objects on a rectangular table, a disc
//! gripper swept along straight-line pushes, and a raster renderer that
//! produces the observation images.

use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;

use crate::error::{Error, Result};

/// Minimum slack allowed when checking object overlap.
pub const OVERLAP_EPS: f64 = 1e-9;

const MAX_PLACEMENT_TRIES: usize = 1000;
const MAX_PUSH_TRIES: usize = 100;

/// RGB palette indexed by `Object::color`.
pub const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.40, 0.95],
    [0.20, 0.85, 0.30],
    [0.95, 0.80, 0.10],
    [0.75, 0.30, 0.90],
    [0.10, 0.85, 0.85],
];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned rectangle in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        min: Vec2::new(0.0, 0.0),
        max: Vec2::new(1.0, 1.0),
    };

    pub fn shrink(self, m: f64) -> Rect {
        Rect {
            min: Vec2::new(self.min.x + m, self.min.y + m),
            max: Vec2::new(self.max.x - m, self.max.y - m),
        }
    }

    pub fn contains(self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn clamp(self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }

    pub fn width(self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn center(self) -> Vec2 {
        (self.min + self.max) * 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub center: Vec2,
    pub radius: f64,
    pub color: usize,
}

/// Ground-truth simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub objects: Vec<Object>,
    pub bounds: Rect,
}

impl WorldState {
    pub fn empty(bounds: Rect) -> Self {
        WorldState {
            objects: Vec::new(),
            bounds,
        }
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn centers(&self) -> Vec<Vec2> {
        self.objects.iter().map(|o| o.center).collect()
    }

    /// Checks the bounds, overlap and palette invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, o) in self.objects.iter().enumerate() {
            if !o.center.is_finite() {
                return Err(format!("object {i} has a non-finite center"));
            }
            let inner = self.bounds.shrink(o.radius - OVERLAP_EPS);
            if !inner.contains(o.center) {
                return Err(format!("object {i} at {:?} leaves the table", o.center));
            }
            for (j, p) in self.objects.iter().enumerate().skip(i + 1) {
                let d = o.center.dist(p.center);
                if d < o.radius + p.radius - OVERLAP_EPS {
                    return Err(format!("objects {i} and {j} overlap (distance {d})"));
                }
                if o.color == p.color {
                    return Err(format!("objects {i} and {j} share color {}", o.color));
                }
            }
        }
        Ok(())
    }
}

/// A straight-line gripper push in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PushAction {
    pub start: Vec2,
    pub end: Vec2,
}

impl PushAction {
    pub fn new(start: Vec2, end: Vec2) -> Self {
        PushAction { start, end }
    }

    pub fn length(&self) -> f64 {
        self.start.dist(self.end)
    }

    pub fn delta(&self) -> Vec2 {
        self.end - self.start
    }

    /// Clamps the start into `bounds`, limits the length to `max_len` and
    /// projects the end into `bounds`. Projection onto a box is
    /// non-expansive, so the length bound survives the last step.
    pub fn clipped(start: Vec2, delta: Vec2, max_len: f64, bounds: Rect) -> Self {
        let start = bounds.clamp(start);
        let len = delta.norm();
        let delta = if len > max_len { delta * (max_len / len) } else { delta };
        let end = bounds.clamp(start + delta);
        PushAction { start, end }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.start.x, self.start.y, self.end.x, self.end.y]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub bounds: Rect,
    pub object_radius: f64,
    pub gripper_radius: f64,
    pub max_push: f64,
    pub substeps: usize,
    pub separation_iters: usize,
    pub grid: usize,
    /// Std-dev of the push mid-point around the chosen object center.
    pub mid_noise: f64,
    /// Half-size range of the square ring the push start is drawn from.
    pub ring_inner: f64,
    pub ring_outer: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            bounds: Rect::UNIT,
            object_radius: 0.06,
            gripper_radius: 0.02,
            max_push: 0.05,
            substeps: 20,
            separation_iters: 10,
            grid: 64,
            mid_noise: 0.01,
            ring_inner: 0.06,
            ring_outer: 0.14,
        }
    }
}

impl SimConfig {
    pub fn raster_meta(&self) -> RasterMeta {
        RasterMeta::for_table(self.bounds, self.grid)
    }
}

/// Draws a scene with `n_objects` non-overlapping discs in distinct colors.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    n_objects: usize,
    cfg: &SimConfig,
) -> Result<WorldState> {
    sample_scene_within(rng, n_objects, cfg, cfg.bounds)
}

/// Like [`sample_scene`], but every object lies inside `region`.
pub fn sample_scene_within<R: Rng + ?Sized>(
    rng: &mut R,
    n_objects: usize,
    cfg: &SimConfig,
    region: Rect,
) -> Result<WorldState> {
    if n_objects > PALETTE.len() {
        return Err(Error::Invalid(format!(
            "at most {} objects supported, got {n_objects}",
            PALETTE.len()
        )));
    }
    let r = cfg.object_radius;
    let region = Rect {
        min: Vec2::new(region.min.x.max(cfg.bounds.min.x), region.min.y.max(cfg.bounds.min.y)),
        max: Vec2::new(region.max.x.min(cfg.bounds.max.x), region.max.y.min(cfg.bounds.max.y)),
    };
    let inner = region.shrink(r);
    if inner.width() < 0.0 || inner.height() < 0.0 {
        return Err(Error::Placement {
            n_objects,
            tries: 0,
        });
    }
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    // partial Fisher-Yates for distinct colors
    for i in 0..n_objects {
        let j = rng.random_range(i..colors.len());
        colors.swap(i, j);
    }
    for _ in 0..MAX_PLACEMENT_TRIES {
        let mut objects: Vec<Object> = Vec::with_capacity(n_objects);
        let mut ok = true;
        for &color in colors.iter().take(n_objects) {
            let c = Vec2::new(
                rng.random_range(inner.min.x..=inner.max.x),
                rng.random_range(inner.min.y..=inner.max.y),
            );
            if objects.iter().any(|o| o.center.dist(c) < o.radius + r) {
                ok = false;
                break;
            }
            objects.push(Object {
                center: c,
                radius: r,
                color,
            });
        }
        if ok {
            return Ok(WorldState {
                objects,
                bounds: cfg.bounds,
            });
        }
    }
    Err(Error::Placement {
        n_objects,
        tries: MAX_PLACEMENT_TRIES,
    })
}

/// Sweeps the gripper along `action` and returns the resulting world.
pub fn step_push(world: &WorldState, action: &PushAction, cfg: &SimConfig) -> WorldState {
    let mut out = world.clone();
    let delta = action.delta();
    let len = delta.norm();
    let push_dir = if len > 0.0 {
        delta * (1.0 / len)
    } else {
        Vec2::new(1.0, 0.0)
    };
    let m = cfg.substeps.max(1);
    for s in 0..=m {
        let g = action.start + delta * (s as f64 / m as f64);
        for o in out.objects.iter_mut() {
            let reach = o.radius + cfg.gripper_radius;
            let d = o.center - g;
            let dist = d.norm();
            if dist < reach {
                let dir = if dist > 0.0 { d * (1.0 / dist) } else { push_dir };
                o.center = g + dir * reach;
            }
        }
        separate(&mut out, cfg.separation_iters, push_dir);
    }
    out
}

/// Pairwise symmetric separation along center lines, with table clamping.
/// When clamping pins one disc, the remaining overlap is handed to the other.
fn separate(world: &mut WorldState, iters: usize, fallback_dir: Vec2) {
    let bounds = world.bounds;
    clamp_all(world);
    let n = world.objects.len();
    for _ in 0..iters {
        let mut moved = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (world.objects[i], world.objects[j]);
                let min_d = a.radius + b.radius;
                let d = b.center - a.center;
                let dist = d.norm();
                if dist >= min_d {
                    continue;
                }
                moved = true;
                let nrm = if dist > 0.0 { d * (1.0 / dist) } else { fallback_dir };
                let half = (min_d - dist) * 0.5;
                let ca = bounds.shrink(a.radius).clamp(a.center - nrm * half);
                let cb = bounds.shrink(b.radius).clamp(b.center + nrm * half);
                // hand any residual overlap caused by clamping to the other disc
                let rest = min_d - (cb - ca).dot(nrm);
                let (ca, cb) = if rest > 0.0 {
                    let cb2 = bounds.shrink(b.radius).clamp(cb + nrm * rest);
                    let rest2 = min_d - (cb2 - ca).dot(nrm);
                    let ca2 = if rest2 > 0.0 {
                        bounds.shrink(a.radius).clamp(ca - nrm * rest2)
                    } else {
                        ca
                    };
                    (ca2, cb2)
                } else {
                    (ca, cb)
                };
                world.objects[i].center = ca;
                world.objects[j].center = cb;
            }
        }
        if !moved {
            break;
        }
    }
}

fn clamp_all(world: &mut WorldState) {
    let bounds = world.bounds;
    for o in world.objects.iter_mut() {
        o.center = bounds.shrink(o.radius).clamp(o.center);
    }
}

/// Affine world-to-pixel map: `pixel = (world - origin) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterMeta {
    pub size: usize,
    pub origin: Vec2,
    pub scale: f64,
}

impl RasterMeta {
    pub fn for_table(bounds: Rect, size: usize) -> Self {
        let extent = bounds.width().max(bounds.height());
        RasterMeta {
            size,
            origin: bounds.min,
            scale: size as f64 / extent,
        }
    }

    pub fn world_to_pixel(&self, p: Vec2) -> Vec2 {
        (p - self.origin) * self.scale
    }

    pub fn pixel_to_world(&self, p: Vec2) -> Vec2 {
        p * (1.0 / self.scale) + self.origin
    }
}

/// Observation image, row-major `[y][x][rgb]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub meta: RasterMeta,
    pub pixels: Vec<f32>,
}

impl Raster {
    pub fn zeros(meta: RasterMeta) -> Self {
        Raster {
            meta,
            pixels: vec![0.0; meta.size * meta.size * 3],
        }
    }

    pub fn size(&self) -> usize {
        self.meta.size
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.meta.size + x) * 3 + c]
    }

    /// Writes a binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let g = self.meta.size;
        let mut out = format!("P6\n{g} {g}\n255\n").into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

/// Paints every object as an antialiased filled disc on a black canvas.
pub fn render(world: &WorldState, meta: RasterMeta) -> Raster {
    let mut raster = Raster::zeros(meta);
    let g = meta.size;
    for o in &world.objects {
        let c = meta.world_to_pixel(o.center);
        let r = o.radius * meta.scale;
        let color = PALETTE[o.color % PALETTE.len()];
        let x0 = ((c.x - r - 1.0).floor().max(0.0)) as usize;
        let y0 = ((c.y - r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((c.x + r + 1.0).ceil().max(0.0) as usize).min(g);
        let y1 = ((c.y + r + 1.0).ceil().max(0.0) as usize).min(g);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = Vec2::new(x as f64 + 0.5, y as f64 + 0.5).dist(c);
                let cov = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                if cov <= 0.0 {
                    continue;
                }
                let base = (y * g + x) * 3;
                for k in 0..3 {
                    let p = &mut raster.pixels[base + k];
                    *p = *p * (1.0 - cov) + color[k] * cov;
                }
            }
        }
    }
    raster
}

/// A sampled random push together with the mid-point it was aimed at.
#[derive(Clone, Copy, Debug)]
pub struct SampledPush {
    pub action: PushAction,
    pub target: usize,
    pub mid: Vec2,
}

/// Random push aimed through a (noisy) object center, starting on a square
/// ring around it and outside every gripper-dilated object.
pub fn sample_random_push<R: Rng + ?Sized>(
    world: &WorldState,
    rng: &mut R,
    cfg: &SimConfig,
) -> SampledPush {
    assert!(!world.objects.is_empty(), "random push needs an object");
    let target = rng.random_range(0..world.objects.len());
    let noise = rand_distr::Normal::new(0.0, cfg.mid_noise.max(0.0)).unwrap();
    let center = world.objects[target].center;
    let mid = Vec2::new(
        center.x + rng.sample(noise),
        center.y + rng.sample(noise),
    );
    let free = |p: Vec2| {
        world.bounds.contains(p)
            && world
                .objects
                .iter()
                .all(|o| o.center.dist(p) > o.radius + cfg.gripper_radius)
    };
    for _ in 0..MAX_PUSH_TRIES {
        let h = rng.random_range(cfg.ring_inner..=cfg.ring_outer);
        let t = rng.random_range(-h..=h);
        let offset = match rng.random_range(0..4) {
            0 => Vec2::new(t, -h),
            1 => Vec2::new(h, t),
            2 => Vec2::new(t, h),
            _ => Vec2::new(-h, t),
        };
        let start = mid + offset;
        if !free(start) {
            continue;
        }
        let end = start + (mid - start) * 2.0;
        let action = PushAction::clipped(start, end - start, cfg.max_push, world.bounds);
        return SampledPush { action, target, mid };
    }
    SampledPush {
        action: sample_free_push(world, rng, cfg, cfg.max_push),
        target,
        mid,
    }
}

/// Push of the given length from a uniform start outside every
/// gripper-dilated object, in a uniform direction.
pub fn sample_free_push<R: Rng + ?Sized>(world: &WorldState, rng: &mut R, cfg: &SimConfig, length: f64) -> PushAction {
    loop {
        let start = Vec2::new(
            rng.random_range(world.bounds.min.x..=world.bounds.max.x),
            rng.random_range(world.bounds.min.y..=world.bounds.max.y),
        );
        if world.objects.iter().any(|o| o.center.dist(start) <= o.radius + cfg.gripper_radius) {
            continue;
        }
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let delta = Vec2::new(theta.cos(), theta.sin()) * length;
        return PushAction::clipped(start, delta, cfg.max_push, world.bounds);
    }
}

/// Ground-truth pixel locations of the object centers, in object-index order.
pub fn object_locations(world: &WorldState, meta: &RasterMeta) -> Vec<Vec2> {
    world
        .objects
        .iter()
        .map(|o| meta.world_to_pixel(o.center))
        .collect()
}

/// True when the gripper path passes within contact distance of any object.
pub fn push_contacts(world: &WorldState, action: &PushAction, gripper_radius: f64) -> bool {
    world.objects.iter().any(|o| {
        segment_point_distance(action.start, action.end, o.center) < o.radius + gripper_radius
    })
}

pub fn segment_point_distance(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(x: f64, y: f64, color: usize) -> Object {
        Object {
            center: Vec2::new(x, y),
            radius: 0.06,
            color,
        }
    }

    #[test]
    fn scene_is_reproducible() {
        let cfg = SimConfig::default();
        let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(7), 2, &cfg).unwrap();
        let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(7), 2, &cfg).unwrap();
        assert_eq!(a, b);
        let one = sample_scene(&mut ChaCha8Rng::seed_from_u64(7), 1, &cfg).unwrap();
        assert_eq!(one.n_objects(), 1);
        one.validate().unwrap();
    }

    #[test]
    fn scenes_never_overlap() {
        let cfg = SimConfig::default();
        for seed in 0..500 {
            let w = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), 2, &cfg).unwrap();
            // brute-force pair check
            for i in 0..w.objects.len() {
                for j in 0..w.objects.len() {
                    if i != j {
                        assert!(w.objects[i].center.dist(w.objects[j].center) >= 0.12);
                    }
                }
            }
            w.validate().unwrap();
        }
    }

    #[test]
    fn oversized_objects_fail_placement() {
        let cfg = SimConfig {
            object_radius: 0.3,
            ..SimConfig::default()
        };
        let err = sample_scene(&mut ChaCha8Rng::seed_from_u64(1), 3, &cfg).unwrap_err();
        assert!(matches!(err, Error::Placement { .. }));
    }

    #[test]
    fn no_contact_leaves_world_unchanged() {
        let cfg = SimConfig::default();
        let w = WorldState {
            objects: vec![disc(0.5, 0.5, 0)],
            bounds: Rect::UNIT,
        };
        let a = PushAction::new(Vec2::new(0.2, 0.2), Vec2::new(0.25, 0.2));
        assert_eq!(step_push(&w, &a, &cfg), w);
    }

    #[test]
    fn head_on_push_leaves_object_ahead_of_gripper() {
        let cfg = SimConfig::default();
        let w = WorldState {
            objects: vec![disc(0.5, 0.5, 0)],
            bounds: Rect::UNIT,
        };
        let a = PushAction::new(Vec2::new(0.5, 0.40), Vec2::new(0.5, 0.47));
        let out = step_push(&w, &a, &cfg);
        let c = out.objects[0].center;
        assert!((c.x - 0.5).abs() < 1e-12);
        assert!((c.y - 0.55).abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn chained_push_moves_second_object() {
        let cfg = SimConfig::default();
        let w = WorldState {
            objects: vec![disc(0.3, 0.5, 0), disc(0.42, 0.5, 1)],
            bounds: Rect::UNIT,
        };
        let a = PushAction::new(Vec2::new(0.22, 0.5), Vec2::new(0.27, 0.5));
        let out = step_push(&w, &a, &cfg);
        assert!(out.objects[1].center.x > 0.42 + 1e-6);
        out.validate().unwrap();
    }

    #[test]
    fn coincident_gripper_projects_along_push() {
        let cfg = SimConfig::default();
        let w = WorldState {
            objects: vec![disc(0.5, 0.5, 0)],
            bounds: Rect::UNIT,
        };
        let a = PushAction::new(Vec2::new(0.5, 0.5), Vec2::new(0.5, 0.5));
        let out = step_push(&w, &a, &cfg);
        assert!((out.objects[0].center.x - 0.58).abs() < 1e-12);
    }

    #[test]
    fn render_empty_world_is_black() {
        let cfg = SimConfig::default();
        let r = render(&WorldState::empty(Rect::UNIT), cfg.raster_meta());
        assert!(r.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_footprint_matches_distance_test() {
        let cfg = SimConfig::default();
        let meta = cfg.raster_meta();
        let w = WorldState {
            objects: vec![disc(0.5, 0.5, 2)],
            bounds: Rect::UNIT,
        };
        let r = render(&w, meta);
        let rp = 0.06 * meta.scale;
        for y in 0..64 {
            for x in 0..64 {
                let d = Vec2::new(x as f64 + 0.5, y as f64 + 0.5).dist(Vec2::new(32.0, 32.0));
                let lit = (0..3).any(|c| r.get(x, y, c) > 0.0);
                if d <= rp - 0.5 {
                    assert!(lit, "({x},{y}) should be inside");
                }
                if d >= rp + 0.5 {
                    assert!(!lit, "({x},{y}) should be outside");
                }
            }
        }
        assert_eq!(r, render(&w, meta));
        assert!(r.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn locations_use_affine_map() {
        let cfg = SimConfig::default();
        let meta = cfg.raster_meta();
        let w = WorldState {
            objects: vec![disc(0.5, 0.5, 0), disc(0.2, 0.8, 1)],
            bounds: Rect::UNIT,
        };
        let locs = object_locations(&w, &meta);
        assert!((locs[0].x - 32.0).abs() <= 0.5 && (locs[0].y - 32.0).abs() <= 0.5);
        for (l, o) in locs.iter().zip(&w.objects) {
            let back = meta.world_to_pixel(meta.pixel_to_world(*l));
            assert!(back.dist(*l) < 0.5);
            assert!(meta.pixel_to_world(*l).dist(o.center) < 1e-12);
        }
    }

    #[test]
    fn random_push_starts_outside_objects() {
        let cfg = SimConfig::default();
        let w = WorldState {
            objects: vec![disc(0.5, 0.5, 0)],
            bounds: Rect::UNIT,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = sample_random_push(&w, &mut rng, &cfg);
            assert!(p.action.start.dist(w.objects[0].center) > 0.08);
            assert!(p.action.length() <= cfg.max_push + 1e-12);
            assert!(Rect::UNIT.contains(p.action.start) && Rect::UNIT.contains(p.action.end));
        }
    }

    #[test]
    fn push_mid_points_concentrate_on_centers() {
        let cfg = SimConfig::default();
        let w = WorldState {
            objects: vec![disc(0.4, 0.6, 0)],
            bounds: Rect::UNIT,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let mut mean = Vec2::ZERO;
        for _ in 0..n {
            mean = mean + sample_random_push(&w, &mut rng, &cfg).mid * (1.0 / n as f64);
        }
        assert!(mean.dist(w.objects[0].center) < 2.0 * cfg.mid_noise);
    }

    #[test]
    fn fallback_push_when_ring_is_blocked() {
        // ring entirely outside a tiny table: every ring sample is rejected
        let cfg = SimConfig {
            bounds: Rect {
                min: Vec2::new(0.0, 0.0),
                max: Vec2::new(0.3, 0.3),
            },
            ring_inner: 0.5,
            ring_outer: 0.6,
            ..SimConfig::default()
        };
        let w = WorldState {
            objects: vec![disc(0.15, 0.15, 0)],
            bounds: cfg.bounds,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_random_push(&w, &mut rng, &cfg);
        assert!(p.action.start.dist(w.objects[0].center) > 0.08);
        assert!(cfg.bounds.contains(p.action.end));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn two_discs() -> impl Strategy<Value = WorldState> {
            (0u64..u64::MAX).prop_map(|seed| {
                sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), 2, &SimConfig::default()).unwrap()
            })
        }

        fn push() -> impl Strategy<Value = PushAction> {
            (0.0..1.0f64, 0.0..1.0f64, -0.05..0.05f64, -0.05..0.05f64).prop_map(|(x, y, dx, dy)| {
                PushAction::clipped(Vec2::new(x, y), Vec2::new(dx, dy), 0.05, Rect::UNIT)
            })
        }

        /// Two discs in the middle of the table and a push aimed near the first.
        fn central() -> impl Strategy<Value = (WorldState, PushAction)> {
            (0u64..u64::MAX, -0.12..0.12f64, -0.12..0.12f64, -0.05..0.05f64, -0.05..0.05f64).prop_map(
                |(seed, ox, oy, dx, dy)| {
                    let cfg = SimConfig::default();
                    let region = Rect { min: Vec2::new(0.3, 0.3), max: Vec2::new(0.7, 0.7) };
                    let w = sample_scene_within(&mut ChaCha8Rng::seed_from_u64(seed), 2, &cfg, region).unwrap();
                    let s = w.objects[0].center + Vec2::new(ox, oy);
                    (w, PushAction::new(s, s + Vec2::new(dx, dy)))
                },
            )
        }

        fn far_from_walls(w: &WorldState, margin: f64) -> bool {
            w.objects.iter().all(|o| w.bounds.shrink(o.radius + margin).contains(o.center))
        }

        proptest! {
            #[test]
            fn pushes_keep_world_valid(w in two_discs(), a in push()) {
                let out = step_push(&w, &a, &SimConfig::default());
                prop_assert!(out.validate().is_ok(), "{:?}", out.validate());
            }

            #[test]
            fn pushes_never_exceed_gripper_travel(w in two_discs(), a in push()) {
                let cfg = SimConfig::default();
                let out = step_push(&w, &a, &cfg);
                for (o, p) in out.objects.iter().zip(&w.objects) {
                    // a disc can be dragged at most the push length plus contact resolution
                    prop_assert!(o.center.dist(p.center) <= a.length() + 2.0 * (cfg.object_radius + cfg.gripper_radius));
                }
            }

            #[test]
            fn translation_equivariance((w, a) in central(), tx in -0.1..0.1f64, ty in -0.1..0.1f64) {
                let cfg = SimConfig::default();
                let t = Vec2::new(tx, ty);
                let out = step_push(&w, &a, &cfg);
                prop_assume!(far_from_walls(&out, 0.1));
                let mut moved = w.clone();
                for o in moved.objects.iter_mut() {
                    o.center = o.center + t;
                }
                let out_t = step_push(&moved, &PushAction::new(a.start + t, a.end + t), &cfg);
                for (p, q) in out.objects.iter().zip(&out_t.objects) {
                    prop_assert!((p.center + t).dist(q.center) < 1e-9);
                }
            }

            #[test]
            fn mirror_symmetry((w, a) in central()) {
                let cfg = SimConfig::default();
                let flip = |v: Vec2| Vec2::new(1.0 - v.x, v.y);
                let out = step_push(&w, &a, &cfg);
                prop_assume!(far_from_walls(&out, 0.01));
                let mut m = w.clone();
                for o in m.objects.iter_mut() {
                    o.center = flip(o.center);
                }
                let out_m = step_push(&m, &PushAction::new(flip(a.start), flip(a.end)), &cfg);
                for (p, q) in out.objects.iter().zip(&out_m.objects) {
                    prop_assert!(flip(p.center).dist(q.center) < 1e-9);
                }
            }

            #[test]
            fn clipped_actions_respect_limits(x in -1.0..2.0f64, y in -1.0..2.0f64, dx in -1.0..1.0f64, dy in -1.0..1.0f64) {
                let a = PushAction::clipped(Vec2::new(x, y), Vec2::new(dx, dy), 0.05, Rect::UNIT);
                prop_assert!(a.length() <= 0.05 + 1e-12);
                prop_assert!(Rect::UNIT.contains(a.start) && Rect::UNIT.contains(a.end));
            }
        }
    }
}
