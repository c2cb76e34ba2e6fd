//! Synthetic scenes with analytic ground truth and on-disk datasets.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::optics::{self, PolStack, COLORS};
use crate::patfile::{self, Precision};

pub const DEFAULT_REFRACTIVE_INDEX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sfp,
    Dfp,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sfp => "sfp",
            Task::Dfp => "dfp",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfp" => Ok(Task::Sfp),
            "dfp" => Ok(Task::Dfp),
            other => Err(Error::Config(format!("unknown task `{other}` (expected sfp or dfp)"))),
        }
    }
}

/// Degree of polarization of diffusely reflected light at zenith `theta`
/// for refractive index `n`.
pub fn diffuse_dolp(theta: f64, n: f64) -> Result<f64> {
    if !(0.0..FRAC_PI_2).contains(&theta) {
        return Err(Error::Invalid(format!("zenith angle {theta} outside [0, pi/2)")));
    }
    if !(n > 1.0) {
        return Err(Error::Invalid(format!("refractive index {n} must exceed 1")));
    }
    let (s, c) = theta.sin_cos();
    let s2 = s * s;
    let num = (n - 1.0 / n).powi(2) * s2;
    let den = 2.0 + 2.0 * n * n - (n + 1.0 / n).powi(2) * s2 + 4.0 * c * (n * n - s2).sqrt();
    Ok(num / den)
}

/// Smooth random texture, `[3, H, W]`, with values spanning `[lo, hi]`.
pub fn smooth_texture<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, lo: f64, hi: f64) -> Array {
    let mut out = Array::zeros(&[COLORS, h, w]);
    for c in 0..COLORS {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.5..3.0) * 2.0 * PI / h as f64,
                    rng.random_range(0.5..3.0) * 2.0 * PI / w as f64,
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.3..1.0),
                ]
            })
            .collect();
        let plane: Vec<f64> = (0..h * w)
            .map(|k| {
                let (y, x) = ((k / w) as f64, (k % w) as f64);
                waves.iter().map(|[fy, fx, ph, a]| a * (fy * y + fx * x + ph).sin()).sum()
            })
            .collect();
        let (mn, mx) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (mx - mn).max(1e-12);
        for (k, v) in plane.iter().enumerate() {
            out.data_mut()[c * h * w + k] = lo + (hi - lo) * (v - mn) / span;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SfpScene {
    pub stack: PolStack,
    /// `[3, H, W]` unit normals `(x, y, z)` with z toward the camera.
    pub normals: Array,
    /// `[1, H, W]` foreground indicator.
    pub mask: Array,
    /// `[H, W]` azimuth of the normal, radians.
    pub azimuth: Array,
    /// `[H, W]` zenith angle of the normal, radians.
    pub zenith: Array,
    pub n: f64,
}

/// Orthographic sphere centred at pixel `(H/2, W/2)` with radius
/// `0.4 * min(H, W)` over a textured, unpolarized background.
pub fn render_sfp_sphere(h: usize, w: usize, n: f64, s0_texture: &Array) -> Result<SfpScene> {
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("scene size {h}x{w} must be a positive multiple of 4")));
    }
    if s0_texture.shape() != [COLORS, h, w] {
        return Err(Error::shape("render_sfp_sphere", s0_texture.shape(), &[COLORS, h, w]));
    }
    let r = 0.4 * h.min(w) as f64;
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let hw = h * w;
    let mut normals = Array::zeros(&[3, h, w]);
    let mut mask = Array::zeros(&[1, h, w]);
    let mut azimuth = Array::zeros(&[h, w]);
    let mut zenith = Array::zeros(&[h, w]);
    let mut s1 = Array::zeros(&[COLORS, h, w]);
    let mut s2 = Array::zeros(&[COLORS, h, w]);
    for k in 0..hw {
        let u = ((k % w) as f64 - cx) / r;
        let v = ((k / w) as f64 - cy) / r;
        let rho2 = u * u + v * v;
        let nrm = if rho2 < 1.0 { [u, -v, (1.0 - rho2).sqrt()] } else { [0.0, 0.0, 1.0] };
        for (i, c) in nrm.iter().enumerate() {
            normals.data_mut()[i * hw + k] = *c;
        }
        if rho2 >= 1.0 {
            continue;
        }
        mask.data_mut()[k] = 1.0;
        let theta = nrm[2].clamp(-1.0, 1.0).acos();
        let alpha = nrm[1].atan2(nrm[0]);
        azimuth.data_mut()[k] = alpha;
        zenith.data_mut()[k] = theta;
        let rho = diffuse_dolp(theta, n)?;
        let (sn, cs) = (2.0 * alpha).sin_cos();
        for c in 0..COLORS {
            let s0 = s0_texture.data()[c * hw + k];
            s1.data_mut()[c * hw + k] = rho * s0 * cs;
            s2.data_mut()[c * hw + k] = rho * s0 * sn;
        }
    }
    let stack = optics::stack_from_stokes(s0_texture, &s1, &s2)?;
    Ok(SfpScene { stack, normals, mask, azimuth, zenith, n })
}

/// Maximum deviation from the scene's analytic invariants: unit normals,
/// AoP equal to azimuth mod pi, DoLP equal to the diffuse model (masked).
pub fn sfp_invariant_error(scene: &SfpScene) -> Result<f64> {
    let st = optics::stokes_from_stack(&scene.stack);
    let (h, w) = (scene.stack.height(), scene.stack.width());
    let hw = h * w;
    let mut worst: f64 = 0.0;
    for k in 0..hw {
        if scene.mask.data()[k] == 0.0 {
            continue;
        }
        let n: f64 = (0..3).map(|i| scene.normals.data()[i * hw + k].powi(2)).sum::<f64>().sqrt();
        worst = worst.max((n - 1.0).abs());
        let rho = diffuse_dolp(scene.zenith.data()[k], scene.n)?;
        for c in 0..COLORS {
            let o = c * hw + k;
            worst = worst.max((st.dolp.data()[o] - rho).abs());
            if rho > 1e-6 {
                worst = worst.max(optics::wrapped_aop_diff(st.aop.data()[o], scene.azimuth.data()[k]));
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfpParams {
    pub rho_r: f64,
    pub rho_t: f64,
    pub aop_r: f64,
    pub aop_t: f64,
}

#[derive(Clone, Debug)]
pub struct DfpScene {
    pub mixed: PolStack,
    pub trans_stack: PolStack,
    pub refl_stack: PolStack,
    /// Transmission S0, `[3, H, W]`: the reflection-free target.
    pub transmission: Array,
    /// Reflection S0, `[3, H, W]`.
    pub reflection: Array,
    pub params: DfpParams,
}

fn layer_stack(s0: &Array, rho: f64, aop: f64) -> Result<PolStack> {
    let (sn, cs) = (2.0 * aop).sin_cos();
    optics::stack_from_stokes(s0, &s0.map(|v| rho * v * cs), &s0.map(|v| rho * v * sn))
}

/// Transmission plus partially polarized reflection, each layer with
/// constant DoLP and AoP over the image.
pub fn render_dfp_scene(transmission: &Array, reflection: &Array, p: DfpParams) -> Result<DfpScene> {
    if !(0.0 <= p.rho_t && p.rho_t < p.rho_r && p.rho_r <= 1.0) {
        return Err(Error::Invalid(format!("need 0 <= rho_t < rho_r <= 1, got rho_t={} rho_r={}", p.rho_t, p.rho_r)));
    }
    if transmission.shape() != reflection.shape() {
        return Err(Error::shape("render_dfp_scene", transmission.shape(), reflection.shape()));
    }
    if let Some(i) = transmission.data().iter().zip(reflection.data()).position(|(a, b)| a + b > 1.0) {
        return Err(Error::Invalid(format!("mixed S0 exceeds 1 at flat index {i}; lower the layer amplitudes")));
    }
    let t = layer_stack(transmission, p.rho_t, p.aop_t)?;
    let r = layer_stack(reflection, p.rho_r, p.aop_r)?;
    let mixed = PolStack::new(t.array().zip(r.array(), "mix", |a, b| a + b)?)?;
    Ok(DfpScene {
        mixed,
        trans_stack: t,
        refl_stack: r,
        transmission: transmission.clone(),
        reflection: reflection.clone(),
        params: p,
    })
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"scene");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn random_sfp_scene(seed: u64, index: usize, size: usize) -> Result<SfpScene> {
    let mut rng = scene_rng(seed, index);
    let tex = smooth_texture(&mut rng, size, size, 0.25, 0.9);
    render_sfp_sphere(size, size, DEFAULT_REFRACTIVE_INDEX, &tex)
}

pub fn random_dfp_scene(seed: u64, index: usize, size: usize) -> Result<DfpScene> {
    let mut rng = scene_rng(seed, index);
    let t = smooth_texture(&mut rng, size, size, 0.15, 0.55);
    let r = smooth_texture(&mut rng, size, size, 0.05, 0.4);
    let rho_r = rng.random_range(0.5..1.0);
    let p = DfpParams {
        rho_r,
        rho_t: rng.random_range(0.0..0.3 * rho_r),
        aop_r: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
        aop_t: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
    };
    render_dfp_scene(&t, &r, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    MetaTrain,
    MetaTest,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::MetaTrain, Split::MetaTest, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::MetaTrain => "meta-train",
            Split::MetaTest => "meta-test",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, meta-train, meta-test or test)")))
    }
}

/// Split sizes by largest-remainder rounding; ties go to the earlier split.
pub fn split_sizes(count: usize, ratios: [f64; 4]) -> Result<[usize; 4]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let exact = ratios.map(|r| r * count as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = count - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

pub const DEFAULT_SPLIT: [f64; 4] = [64.0 / 96.0, 16.0 / 96.0, 8.0 / 96.0, 8.0 / 96.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub split: Split,
    /// Field name to file path relative to the dataset directory.
    pub files: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dfp: Option<DfpParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refractive_index: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub seed: u64,
    pub size: usize,
    pub count: usize,
    pub split_ratios: [f64; 4],
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.scenes.iter().filter(|s| s.split == split).map(|s| s.index).collect()
    }
}

pub struct DatasetSpec {
    pub task: Task,
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub split_ratios: [f64; 4],
}

/// Generates every scene and writes `manifest.json` plus
/// `scene_<idx>_<field>.pat` into `out`.
pub fn make_dataset(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    if spec.count == 0 {
        return Err(Error::Config("scene count must be positive".into()));
    }
    if spec.size == 0 || spec.size % 8 != 0 {
        return Err(Error::Config(format!("image size {} must be a positive multiple of 8", spec.size)));
    }
    let sizes = split_sizes(spec.count, spec.split_ratios)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let split_of = |i: usize| {
        let mut acc = 0;
        for (k, s) in sizes.iter().enumerate() {
            acc += s;
            if i < acc {
                return Split::ALL[k];
            }
        }
        Split::Test
    };
    let scenes = (0..spec.count)
        .into_par_iter()
        .map(|i| -> Result<SceneEntry> {
            let (fields, dfp): (Vec<(&str, Array)>, _) = match spec.task {
                Task::Sfp => {
                    let s = random_sfp_scene(spec.seed, i, spec.size)?;
                    let err = sfp_invariant_error(&s)?;
                    if err > 1e-9 {
                        return Err(Error::Internal(format!("scene {i} violates SfP invariants by {err:e}")));
                    }
                    (vec![("stack", s.stack.into_array()), ("normals", s.normals), ("mask", s.mask)], None)
                }
                Task::Dfp => {
                    let s = random_dfp_scene(spec.seed, i, spec.size)?;
                    let params = s.params;
                    let fields = vec![
                        ("stack", s.mixed.into_array()),
                        ("transmission", s.transmission),
                        ("reflection", s.reflection),
                        ("trans_stack", s.trans_stack.into_array()),
                    ];
                    (fields, Some(params))
                }
            };
            let mut files = IndexMap::new();
            for (name, a) in fields {
                let file = format!("scene_{i:04}_{name}.pat");
                patfile::write(&out.join(&file), &a, Precision::F32)?;
                files.insert(name.to_string(), file);
            }
            let refractive_index = (spec.task == Task::Sfp).then_some(DEFAULT_REFRACTIVE_INDEX);
            Ok(SceneEntry { index: i, split: split_of(i), files, dfp, refractive_index })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        task: spec.task,
        seed: spec.seed,
        size: spec.size,
        count: spec.count,
        split_ratios: spec.split_ratios,
        scenes,
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One scene held in memory.
#[derive(Clone, Debug)]
pub struct Scene {
    pub index: usize,
    /// Reference stack `[12, H, W]`.
    pub stack: Array,
    /// SfP: normals `[3, H, W]`; DfP: transmission S0 `[3, H, W]`.
    pub target: Array,
    /// SfP foreground mask `[1, H, W]`.
    pub mask: Option<Array>,
    /// DfP transmission-only stack `[12, H, W]`.
    pub trans_stack: Option<Array>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub splits: IndexMap<Split, Vec<Scene>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut splits: IndexMap<Split, Vec<Scene>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
        for e in &manifest.scenes {
            let field = |name: &str| -> Result<Array> {
                let f = e.files.get(name).ok_or_else(|| {
                    Error::Config(format!("manifest scene {} lacks field `{name}`", e.index))
                })?;
                patfile::read(&dir.join(f))
            };
            let stack = field("stack")?;
            let s = manifest.size;
            if stack.shape() != [optics::CHANNELS, s, s] {
                return Err(Error::Config(format!("scene {} stack has shape {:?}, expected [12, {s}, {s}]", e.index, stack.shape())));
            }
            let scene = match manifest.task {
                Task::Sfp => Scene { index: e.index, stack, target: field("normals")?, mask: Some(field("mask")?), trans_stack: None },
                Task::Dfp => Scene {
                    index: e.index,
                    stack,
                    target: field("transmission")?,
                    mask: None,
                    trans_stack: Some(field("trans_stack")?),
                },
            };
            splits.get_mut(&e.split).expect("all splits present").push(scene);
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, splits })
    }

    pub fn split(&self, s: Split) -> &[Scene] {
        self.splits.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dolp_is_zero_at_normal_incidence_and_monotone() {
        assert_eq!(diffuse_dolp(0.0, 1.5).unwrap(), 0.0);
        assert!(diffuse_dolp(0.3, 1.5).unwrap() < diffuse_dolp(0.6, 1.5).unwrap());
        assert!(diffuse_dolp(FRAC_PI_2, 1.5).is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10, [0.6, 0.2, 0.1, 0.1]).unwrap(), [6, 2, 1, 1]);
        assert_eq!(split_sizes(96, DEFAULT_SPLIT).unwrap(), [64, 16, 8, 8]);
        assert!(split_sizes(10, [0.5, 0.2, 0.1, 0.1]).is_err());
    }

    #[test]
    fn sphere_centre_and_limb() {
        let tex = Array::full(&[3, 16, 16], 0.5);
        let s = render_sfp_sphere(16, 16, 1.5, &tex).unwrap();
        let hw = 256;
        let centre = 8 * 16 + 8;
        assert_eq!([0, 1, 2].map(|i| s.normals.data()[i * hw + centre]), [0.0, 0.0, 1.0]);
        let st = optics::stokes_from_stack(&s.stack);
        assert_eq!(st.dolp.data()[centre], 0.0);
        // +x limb on the centre row: azimuth 0 and AoP 0.
        let limb = 8 * 16 + 14;
        assert_eq!(s.mask.data()[limb], 1.0);
        assert_eq!(s.azimuth.data()[limb], 0.0);
        assert!(st.aop.data()[limb].abs() < 1e-12);
    }

    #[test]
    fn dfp_extinction_at_ninety_degrees() {
        let t = Array::full(&[3, 4, 4], 0.3);
        let r = Array::full(&[3, 4, 4], 0.2);
        let s = render_dfp_scene(&t, &r, DfpParams { rho_r: 1.0, rho_t: 0.0, aop_r: 0.0, aop_t: 0.0 }).unwrap();
        let i90 = optics::channel(1, 2);
        assert_eq!(s.mixed.get(1, 2, 0, 0), s.trans_stack.get(1, 2, 0, 0));
        assert_eq!(s.refl_stack.array().data()[i90 * 16], 0.0);
    }

    #[test]
    fn dfp_rejects_overexposure() {
        let t = Array::full(&[3, 4, 4], 0.6);
        let p = DfpParams { rho_r: 0.5, rho_t: 0.1, aop_r: 0.0, aop_t: 0.0 };
        assert!(render_dfp_scene(&t, &t, p).is_err());
    }
}
