//! Procedural face corpus: smooth-edged geometric faces where identity
//! controls palette and proportions and expression controls brow, eye, and
//! mouth pose. Every pixel is a pure function of (seed, identity, expression,
//! sample index), so regeneration is byte-identical.
//!
//! Feature placement is fixed in normalized coordinates: brows and eyes stay
//! inside rows [0.28, 0.44) x cols [0.25, 0.75), the mouth inside rows
//! [0.62, 0.78) x cols [0.28, 0.72). Editing masks elsewhere rely on these
//! bands.

use std::path::Path;

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::data::{save_png, DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};
use crate::scalar::Scalar;

/// Per-record perturbation amplitudes, all in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    /// Max |offset| of the whole face, as a fraction of image size.
    pub position: f64,
    /// Max relative deviation of the face scale from 1.
    pub scale: f64,
    /// Max relative deviation of brightness from 1.
    pub color: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        JitterParams { position: 0.02, scale: 0.05, color: 0.08 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyfacesSpec {
    pub n_identities: usize,
    /// Must equal [`N_EXPRESSIONS`]; the expression table is fixed.
    pub n_expressions: usize,
    pub samples_per_cell: usize,
    pub image_size: usize,
    pub jitter: JitterParams,
    pub seed: u64,
}

pub const N_EXPRESSIONS: usize = 7;

pub const EXPRESSION_NAMES: [&str; N_EXPRESSIONS] =
    ["neutral", "happy", "sad", "surprised", "angry", "fearful", "disgusted"];

impl Default for ToyfacesSpec {
    fn default() -> Self {
        ToyfacesSpec {
            n_identities: 6,
            n_expressions: N_EXPRESSIONS,
            samples_per_cell: 20,
            image_size: 32,
            jitter: JitterParams::default(),
            seed: 0,
        }
    }
}

impl ToyfacesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_expressions != N_EXPRESSIONS {
            return Err(Error::Validation(format!(
                "expression table has exactly {N_EXPRESSIONS} entries, got n_expressions = {}",
                self.n_expressions
            )));
        }
        if self.n_identities < 2 {
            return Err(Error::Validation("need at least 2 identities".into()));
        }
        if self.samples_per_cell < 2 {
            return Err(Error::Validation("need at least 2 samples per cell".into()));
        }
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::Validation(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        let j = &self.jitter;
        if !(j.position >= 0.0 && j.scale >= 0.0 && j.color >= 0.0)
            || !(j.position.is_finite() && j.scale.is_finite() && j.color.is_finite())
        {
            return Err(Error::Validation("jitter amplitudes must be finite and >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Identity traits and expression poses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct IdentityTraits {
    bg: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    mouth: [f64; 3],
    /// Face width / height multipliers.
    gw: f64,
    gh: f64,
    /// Horizontal eye offset from center.
    eye_dx: f64,
    /// Mouth half-width.
    mouth_hw: f64,
}

fn unit(r: &mut ChaCha8Rng) -> f64 {
    f64::unit_uniform(r)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn identity_traits(seed: u64, id: usize) -> IdentityTraits {
    let mut r = stream(seed, StreamKind::IdentityTraits, id as u64, 0);
    // golden-ratio hue spacing keeps palettes far apart for any identity count
    let hue = (id as f64 * 0.618_033_988_75 + 0.05 * unit(&mut r)).rem_euclid(1.0);
    let skin = hsv(hue, 0.30 + 0.20 * unit(&mut r), 0.70 + 0.25 * unit(&mut r));
    let hair = hsv(hue + 0.35 + 0.20 * unit(&mut r), 0.55 + 0.30 * unit(&mut r), 0.25 + 0.35 * unit(&mut r));
    let iris = hsv(hue + 0.60, 0.65, 0.20 + 0.15 * unit(&mut r));
    let mouth_scale = 0.75 + 0.45 * unit(&mut r);
    let mouth = [0.55 * mouth_scale, 0.16 * mouth_scale, 0.22 * mouth_scale];
    let bg_tint = hsv(hue + 0.5, 0.10, 0.88 + 0.08 * unit(&mut r));
    IdentityTraits {
        bg: bg_tint,
        skin,
        hair,
        iris,
        mouth,
        gw: 0.88 + 0.12 * unit(&mut r),
        gh: 0.88 + 0.12 * unit(&mut r),
        eye_dx: 0.115 + 0.030 * unit(&mut r),
        mouth_hw: 0.120 + 0.030 * unit(&mut r),
    }
}

#[derive(Debug, Clone, Copy)]
struct ExpressionPose {
    /// Radians-like tilt; positive pulls inner brow ends down.
    brow_angle: f64,
    /// Positive lifts both brows.
    brow_raise: f64,
    /// Vertical eye opening multiplier.
    eye_open: f64,
    /// Positive curves mouth corners up.
    mouth_curve: f64,
    /// Vertical mouth opening, 0 = closed.
    mouth_open: f64,
}

const EXPRESSIONS: [ExpressionPose; N_EXPRESSIONS] = [
    // neutral
    ExpressionPose { brow_angle: 0.0, brow_raise: 0.0, eye_open: 1.0, mouth_curve: 0.0, mouth_open: 0.0 },
    // happy
    ExpressionPose { brow_angle: -0.15, brow_raise: 0.2, eye_open: 1.0, mouth_curve: 1.0, mouth_open: 0.35 },
    // sad
    ExpressionPose { brow_angle: 0.25, brow_raise: -0.1, eye_open: 0.8, mouth_curve: -1.0, mouth_open: 0.0 },
    // surprised
    ExpressionPose { brow_angle: 0.0, brow_raise: 0.9, eye_open: 1.55, mouth_curve: 0.0, mouth_open: 1.0 },
    // angry
    ExpressionPose { brow_angle: 0.45, brow_raise: -0.6, eye_open: 0.75, mouth_curve: -0.5, mouth_open: 0.15 },
    // fearful
    ExpressionPose { brow_angle: 0.1, brow_raise: 0.7, eye_open: 1.35, mouth_curve: -0.7, mouth_open: 0.55 },
    // disgusted
    ExpressionPose { brow_angle: -0.3, brow_raise: -0.45, eye_open: 0.55, mouth_curve: -0.25, mouth_open: 0.7 },
];

#[derive(Debug, Clone, Copy)]
struct Jitter {
    dx: f64,
    dy: f64,
    scale: f64,
    bright: f64,
}

const NO_JITTER: Jitter = Jitter { dx: 0.0, dy: 0.0, scale: 1.0, bright: 1.0 };

fn sample_jitter(seed: u64, cell: u64, k: u64, p: &JitterParams) -> Jitter {
    let mut r = stream(seed, StreamKind::RecordJitter, cell, k);
    let sym = |r: &mut ChaCha8Rng| 2.0 * unit(r) - 1.0;
    Jitter {
        dx: p.position * sym(&mut r),
        dy: p.position * sym(&mut r),
        scale: 1.0 + p.scale * sym(&mut r),
        bright: 1.0 + p.color * sym(&mut r),
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Half-width of the smooth edge around every shape, in normalized units.
const SOFT: f64 = 0.02;

fn coverage(sdf: f64) -> f64 {
    (0.5 - sdf / SOFT).clamp(0.0, 1.0)
}

fn over(dst: [f64; 3], src: [f64; 3], alpha: f64) -> [f64; 3] {
    [
        dst[0] + (src[0] - dst[0]) * alpha,
        dst[1] + (src[1] - dst[1]) * alpha,
        dst[2] + (src[2] - dst[2]) * alpha,
    ]
}

fn ellipse_sdf(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
    (q.sqrt() - 1.0) * rx.min(ry)
}

fn segment_sdf(u: f64, v: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (u - a.0, v - a.1);
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let t = ((px * bx + py * by) / (bx * bx + by * by)).clamp(0.0, 1.0);
    ((px - t * bx).powi(2) + (py - t * by).powi(2)).sqrt()
}

fn shade(u: f64, v: f64, t: &IdentityTraits, e: &ExpressionPose) -> [f64; 3] {
    let mut col = t.bg;
    col = over(col, t.hair, coverage(ellipse_sdf(u, v, 0.5, 0.42, 0.345 * t.gw, 0.33 * t.gh)));
    col = over(col, t.skin, coverage(ellipse_sdf(u, v, 0.5, 0.55, 0.30 * t.gw, 0.36 * t.gh)));
    for s in [-1.0f64, 1.0] {
        let ex = 0.5 + s * t.eye_dx;
        let bv = 0.315 - 0.02 * e.brow_raise;
        let inner = (ex - s * 0.05, bv + 0.04 * e.brow_angle);
        let outer = (ex + s * 0.05, bv - 0.04 * e.brow_angle);
        col = over(col, t.hair, coverage(segment_sdf(u, v, inner, outer) - 0.011));
        let d_eye = ellipse_sdf(u, v, ex, 0.37, 0.052 * t.gw, 0.038 * e.eye_open);
        col = over(col, t.iris, coverage(d_eye));
    }
    let x = u - 0.5;
    let xr = (x / t.mouth_hw).clamp(-1.0, 1.0);
    let vmid = 0.70 + 0.06 * e.mouth_curve * (xr * xr - 0.5);
    let halfh = 0.010 + 0.030 * e.mouth_open * (1.0 - xr * xr);
    let edge = |s: f64| (0.5 + s / SOFT).clamp(0.0, 1.0);
    let alpha = edge(t.mouth_hw - x.abs()) * edge(halfh - (v - vmid).abs());
    over(col, t.mouth, alpha)
}

fn render(size: usize, t: &IdentityTraits, e: &ExpressionPose, j: &Jitter) -> Array3<f64> {
    let mut img = Array3::zeros((3, size, size));
    let inv = 1.0 / size as f64;
    for r in 0..size {
        for c in 0..size {
            let u0 = (c as f64 + 0.5) * inv;
            let v0 = (r as f64 + 0.5) * inv;
            let u = (u0 - 0.5 - j.dx) / j.scale + 0.5;
            let v = (v0 - 0.5 - j.dy) / j.scale + 0.5;
            let px = shade(u, v, t, e);
            for ch in 0..3 {
                img[[ch, r, c]] = (px[ch] * j.bright).clamp(0.0, 1.0) * 2.0 - 1.0;
            }
        }
    }
    img
}

/// Render one face deterministically. `sample` picks the jitter draw;
/// amplitude zero yields the cell's canonical face.
pub fn render_toyface<F: Scalar>(
    spec: &ToyfacesSpec,
    identity: usize,
    expression: usize,
    sample: usize,
) -> Result<Array3<F>> {
    spec.validate()?;
    if identity >= spec.n_identities || expression >= spec.n_expressions {
        return Err(Error::Validation(format!(
            "cell ({identity}, {expression}) outside ({}, {})",
            spec.n_identities, spec.n_expressions
        )));
    }
    let t = identity_traits(spec.seed, identity);
    let cell = (identity * spec.n_expressions + expression) as u64;
    let j = sample_jitter(spec.seed, cell, sample as u64, &spec.jitter);
    let img = render(spec.image_size, &t, &EXPRESSIONS[expression], &j);
    Ok(img.mapv(F::from_f64c))
}

/// Render the canonical (jitter-free) face of a cell.
pub fn render_centroid_face<F: Scalar>(
    spec: &ToyfacesSpec,
    identity: usize,
    expression: usize,
) -> Result<Array3<F>> {
    let mut zero = spec.clone();
    zero.jitter = JitterParams { position: 0.0, scale: 0.0, color: 0.0 };
    // with zero amplitudes every sample index draws the same face
    let t = identity_traits(zero.seed, identity);
    zero.validate()?;
    if identity >= zero.n_identities || expression >= zero.n_expressions {
        return Err(Error::Validation("cell outside spec".into()));
    }
    Ok(render(zero.image_size, &t, &EXPRESSIONS[expression], &NO_JITTER).mapv(F::from_f64c))
}

/// Generate the full corpus under `out_dir`: one PNG per record plus
/// `manifest.csv` and `manifest.json`. All records start tagged `train`;
/// apply [`crate::data::split_dataset`] afterwards.
pub fn generate_toyfaces(spec: &ToyfacesSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let mut records = Vec::with_capacity(spec.n_identities * spec.n_expressions * spec.samples_per_cell);
    for id in 0..spec.n_identities {
        let traits = identity_traits(spec.seed, id);
        for e in 0..spec.n_expressions {
            let cell = (id * spec.n_expressions + e) as u64;
            for k in 0..spec.samples_per_cell {
                let j = sample_jitter(spec.seed, cell, k as u64, &spec.jitter);
                let img = render(spec.image_size, &traits, &EXPRESSIONS[e], &j);
                let file = format!("face_i{id:02}_e{e}_s{k:03}.png");
                save_png(&out_dir.join(&file), &img)?;
                records.push(ManifestRecord {
                    file,
                    identity: id,
                    expression: e,
                    split: Split::Train,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        records,
        n_identities: spec.n_identities,
        n_expressions: spec.n_expressions,
        image_size: (spec.image_size, spec.image_size),
        seed: spec.seed,
        left_out: None,
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_png;

    fn small_spec() -> ToyfacesSpec {
        ToyfacesSpec { n_identities: 3, samples_per_cell: 2, ..ToyfacesSpec::default() }
    }

    #[test]
    fn spec_validation() {
        ToyfacesSpec::default().validate().unwrap();
        assert!(ToyfacesSpec { n_expressions: 6, ..ToyfacesSpec::default() }.validate().is_err());
        assert!(ToyfacesSpec { samples_per_cell: 1, ..ToyfacesSpec::default() }.validate().is_err());
        assert!(ToyfacesSpec { image_size: 24, ..ToyfacesSpec::default() }.validate().is_err());
        let bad_jitter = ToyfacesSpec {
            jitter: JitterParams { position: -0.1, ..JitterParams::default() },
            ..ToyfacesSpec::default()
        };
        assert!(bad_jitter.validate().is_err());
    }

    #[test]
    fn default_spec_yields_840_records() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toyfaces(&ToyfacesSpec::default(), dir.path()).unwrap();
        assert_eq!(m.records.len(), 840);
        assert_eq!(m.n_identities, 6);
        assert_eq!(m.n_expressions, 7);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = small_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_toyfaces(&spec, d1.path()).unwrap();
        let m2 = generate_toyfaces(&spec, d2.path()).unwrap();
        assert_eq!(m1.records, m2.records);
        for r in &m1.records {
            let a = std::fs::read(d1.path().join(&r.file)).unwrap();
            let b = std::fs::read(d2.path().join(&r.file)).unwrap();
            assert_eq!(a, b, "{} differs between runs", r.file);
        }
    }

    #[test]
    fn zero_jitter_collapses_cells_to_one_image() {
        let spec = ToyfacesSpec {
            jitter: JitterParams { position: 0.0, scale: 0.0, color: 0.0 },
            ..small_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toyfaces(&spec, dir.path()).unwrap();
        for id in 0..spec.n_identities {
            for e in 0..spec.n_expressions {
                let files: Vec<_> = m
                    .records
                    .iter()
                    .filter(|r| r.identity == id && r.expression == e)
                    .map(|r| std::fs::read(dir.path().join(&r.file)).unwrap())
                    .collect();
                assert!(files.windows(2).all(|w| w[0] == w[1]));
                let canon = render_centroid_face::<f64>(&spec, id, e).unwrap();
                let reloaded = load_png::<f64>(&dir.path().join(&m.records[0].file));
                assert!(reloaded.is_ok());
                assert_eq!(canon.dim(), (3, 32, 32));
            }
        }
    }

    #[test]
    fn nearest_centroid_separates_identities_and_expressions() {
        let spec = ToyfacesSpec::default();
        let mut faces = Vec::new();
        for id in 0..spec.n_identities {
            for e in 0..spec.n_expressions {
                faces.push(((id, e), render_centroid_face::<f64>(&spec, id, e).unwrap()));
            }
        }
        let mean_of = |keep: &dyn Fn(usize, usize) -> bool| {
            let sel: Vec<_> = faces.iter().filter(|((i, e), _)| keep(*i, *e)).collect();
            let mut acc = Array3::<f64>::zeros(sel[0].1.dim());
            for (_, f) in &sel {
                acc += f;
            }
            acc / sel.len() as f64
        };
        let id_centroids: Vec<_> =
            (0..spec.n_identities).map(|i| mean_of(&|a, _| a == i)).collect();
        let expr_centroids: Vec<_> =
            (0..spec.n_expressions).map(|e| mean_of(&|_, b| b == e)).collect();
        let nearest = |img: &Array3<f64>, cents: &[Array3<f64>]| {
            cents
                .iter()
                .enumerate()
                .map(|(k, c)| (k, (img - c).mapv(|d| d * d).sum()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0
        };
        for ((id, e), img) in &faces {
            assert_eq!(nearest(img, &id_centroids), *id, "identity miss at ({id}, {e})");
            assert_eq!(nearest(img, &expr_centroids), *e, "expression miss at ({id}, {e})");
        }
    }

    #[test]
    fn features_stay_inside_editing_bands() {
        // difference between expressions must vanish outside the two bands
        let spec = ToyfacesSpec::default();
        let size = spec.image_size as f64;
        for id in 0..2 {
            let neutral = render_centroid_face::<f64>(&spec, id, 0).unwrap();
            for e in 1..spec.n_expressions {
                let other = render_centroid_face::<f64>(&spec, id, e).unwrap();
                let diff = (&neutral - &other).mapv(f64::abs);
                for r in 0..spec.image_size {
                    for c in 0..spec.image_size {
                        let v = (r as f64 + 0.5) / size;
                        let u = (c as f64 + 0.5) / size;
                        let in_upper = (0.28..0.44).contains(&v) && (0.25..0.75).contains(&u);
                        let in_mouth = (0.62..0.78).contains(&v) && (0.28..0.72).contains(&u);
                        if !in_upper && !in_mouth {
                            for ch in 0..3 {
                                assert!(
                                    diff[[ch, r, c]] < 0.35,
                                    "expression {e} leaks outside bands at ({r}, {c})"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn jitter_perturbs_but_stays_in_range() {
        let spec = small_spec();
        let a = render_toyface::<f64>(&spec, 0, 0, 0).unwrap();
        let b = render_toyface::<f64>(&spec, 0, 0, 1).unwrap();
        assert_ne!(a, b);
        for v in a.iter().chain(b.iter()) {
            assert!((-1.0..=1.0).contains(v));
        }
        assert!(render_toyface::<f64>(&spec, 3, 0, 0).is_err());
    }
}
