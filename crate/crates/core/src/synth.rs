//! Synthetic monocular scene generator with controllable difficulty factors.
//!
//! Objects are placed on a ground plane, projected through a pinhole camera
//! and annotated twice: a noise-free truth label and an "annotated" label
//! carrying stratum-dependent observation noise on depth and box corners.
//! Strata are equal-width depth bands; deeper bands use larger noise, so
//! annotation error grows with distance the way real labeling difficulty
//! does. Locations are object centers (the truth 3D box is recoverable from
//! its label row).
//!
//! Generation is deterministic: scene `i` draws from a ChaCha stream
//! `(seed, i)`, so datasets rebuild byte-identically.

use std::fs;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{pixel_extent, Box3D, CameraCalib, GeomError, ProjectedBox};
use crate::kitti::{
    assign_difficulty, parse_calib, parse_label_file, serialize_calib, serialize_label_file,
    Bbox2D, Category, DifficultyLevel, KittiError, ObjectLabel,
};
use crate::{real, Real};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no object landed in frame after {0} attempts")]
    EmptyScene(usize),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dimension sampler for one object class: mean and stddev of `(h, w, l)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDims<F> {
    pub mean: [F; 3],
    pub std: [F; 3],
}

/// Observation-noise level of one depth stratum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStratum<F> {
    /// Depth noise in meters.
    pub sigma_depth: F,
    /// Box-corner noise in pixels.
    pub sigma_corner: F,
}

/// Scene generation settings. Strata partition `[depth_min, depth_max]` into
/// equal bands, one noise level per band.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig<F> {
    pub num_objects_min: usize,
    pub num_objects_max: usize,
    pub depth_min: F,
    pub depth_max: F,
    /// Per-class dimension distributions in canonical class order; the
    /// number of entries fixes the active class count.
    pub class_dims: Vec<ClassDims<F>>,
    pub occlusion_prob: F,
    pub truncation_prob: F,
    pub strata: Vec<NoiseStratum<F>>,
    pub camera: CameraCalib<F>,
    /// Camera height over the ground plane, meters.
    pub camera_height: F,
    pub seed: u64,
}

impl<F: Real> Default for SceneConfig<F> {
    fn default() -> Self {
        let r = real::<F>;
        Self {
            num_objects_min: 2,
            num_objects_max: 6,
            depth_min: r(6.0),
            depth_max: r(60.0),
            class_dims: vec![
                // car, pedestrian, cyclist
                ClassDims {
                    mean: [r(1.53), r(1.63), r(3.88)],
                    std: [r(0.07), r(0.07), r(0.20)],
                },
                ClassDims {
                    mean: [r(1.77), r(0.66), r(0.84)],
                    std: [r(0.06), r(0.05), r(0.08)],
                },
                ClassDims {
                    mean: [r(1.74), r(0.60), r(1.76)],
                    std: [r(0.06), r(0.05), r(0.10)],
                },
            ],
            occlusion_prob: r(0.25),
            truncation_prob: r(0.15),
            strata: vec![
                NoiseStratum {
                    sigma_depth: r(0.1),
                    sigma_corner: r(0.5),
                },
                NoiseStratum {
                    sigma_depth: r(0.5),
                    sigma_corner: r(1.0),
                },
                NoiseStratum {
                    sigma_depth: r(1.5),
                    sigma_corner: r(2.0),
                },
            ],
            camera: CameraCalib::new(r(700.0), r(700.0), r(640.0), r(192.0), r(1280.0), r(384.0))
                .expect("default camera is valid"),
            camera_height: r(1.65),
            seed: 0,
        }
    }
}

impl<F: Real> SceneConfig<F> {
    pub fn num_classes(&self) -> usize {
        self.class_dims.len()
    }

    /// Stratum index of a true depth: equal-width bands over the depth range.
    pub fn stratum_of(&self, depth: F) -> usize {
        let n = self.strata.len();
        let span = self.depth_max - self.depth_min;
        let t = ((depth - self.depth_min) / span).to_f64().unwrap_or(0.0);
        ((t * n as f64) as usize).min(n - 1)
    }
}

/// One generated object.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject<F> {
    /// Noise-free 3D box.
    pub truth_box: Box3D<F>,
    /// Noise-free label row.
    pub truth_label: ObjectLabel<F>,
    /// Observed (noisy) label row, what a real dataset would ship.
    pub label: ObjectLabel<F>,
    /// Difficulty assigned from the observed label.
    pub difficulty: DifficultyLevel,
    pub stratum: usize,
}

/// One generated scene plus its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene<F> {
    pub objects: Vec<SynthObject<F>>,
    pub calib: CameraCalib<F>,
}

fn normal_draw<F: Real, R: Rng>(rng: &mut R, sigma: f64) -> F {
    if sigma <= 0.0 {
        return F::zero();
    }
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    real::<F>(n.sample(rng))
}

fn category_of(class_idx: usize) -> Category {
    Category::from_class_index(class_idx).expect("active class index")
}

struct PlacedObject<F> {
    boxed: Box3D<F>,
    class_idx: usize,
    truncated: F,
    occluded: i32,
    pixel_box_clipped: [F; 4],
}

/// Samples one object; `None` when it misses the frame or degenerates.
fn try_place<F: Real>(cfg: &SceneConfig<F>, rng: &mut ChaCha8Rng) -> Option<PlacedObject<F>> {
    let cal = &cfg.camera;
    let class_idx = rng.gen_range(0..cfg.class_dims.len());
    let spec = &cfg.class_dims[class_idx];
    let mut dims = [F::zero(); 3];
    for i in 0..3 {
        let d = spec.mean[i] + normal_draw(rng, spec.std[i].to_f64().unwrap_or(0.0));
        dims[i] = d.max(real::<F>(0.3));
    }
    let z = real::<F>(
        rng.gen_range(cfg.depth_min.to_f64().unwrap()..cfg.depth_max.to_f64().unwrap()),
    );
    let y = cfg.camera_height - dims[0] / real::<F>(2.0);

    // center x range keeping the whole footprint visible
    let half_span = (dims[1] + dims[2]) / real::<F>(2.0);
    let x_lo = (F::zero() - cal.cx) / cal.fx * z + half_span;
    let x_hi = (cal.img_w - cal.cx) / cal.fx * z - half_span;
    if x_lo >= x_hi {
        return None;
    }
    let truncate = rng.gen_bool(cfg.truncation_prob.to_f64().unwrap().clamp(0.0, 1.0));
    let x = if truncate {
        // push the center toward or past an image border
        let left = rng.gen::<bool>();
        let border = if left {
            (F::zero() - cal.cx) / cal.fx * z
        } else {
            (cal.img_w - cal.cx) / cal.fx * z
        };
        let out = real::<F>(rng.gen_range(0.0..0.8)) * half_span;
        if left {
            border - out
        } else {
            border + out
        }
    } else {
        real::<F>(rng.gen_range(x_lo.to_f64().unwrap()..x_hi.to_f64().unwrap()))
    };

    let boxed = Box3D::new(x, y, z, dims[0], dims[1], dims[2], F::zero()).ok()?;
    let raw = pixel_extent(&boxed, cal).ok()?;
    let [u0, v0, u1, v1] = raw;
    let c0 = u0.max(F::zero());
    let r0 = v0.max(F::zero());
    let c1 = u1.min(cal.img_w);
    let r1 = v1.min(cal.img_h);
    if c1 - c0 < real::<F>(2.0) || r1 - r0 < real::<F>(2.0) {
        return None;
    }
    let full_area = (u1 - u0) * (v1 - v0);
    let vis_area = (c1 - c0) * (r1 - r0);
    let truncated = (F::one() - vis_area / full_area).max(F::zero());
    if truncated.to_f64().unwrap() > 0.9 {
        return None;
    }

    let occluded = if rng.gen_bool(cfg.occlusion_prob.to_f64().unwrap().clamp(0.0, 1.0)) {
        if rng.gen::<bool>() {
            1
        } else {
            2
        }
    } else {
        0
    };

    Some(PlacedObject {
        boxed,
        class_idx,
        truncated,
        occluded,
        pixel_box_clipped: [c0, r0, c1, r1],
    })
}

fn label_from_parts<F: Real>(
    category: Category,
    truncated: F,
    occluded: i32,
    boxed: &Box3D<F>,
    bbox: Bbox2D<F>,
    depth: F,
) -> ObjectLabel<F> {
    let alpha = boxed.yaw - boxed.x.atan2(boxed.z);
    ObjectLabel {
        category,
        truncated,
        occluded,
        alpha,
        bbox,
        dims: [boxed.h, boxed.w, boxed.l],
        loc: [boxed.x, boxed.y, depth],
        rotation_y: boxed.yaw,
        score: None,
    }
}

/// Generates one scene with the supplied RNG stream.
pub fn gen_scene<F: Real>(
    cfg: &SceneConfig<F>,
    rng: &mut ChaCha8Rng,
) -> Result<SynthScene<F>, SynthError> {
    const ATTEMPTS: usize = 100;
    let cal = cfg.camera;
    let n_objects = rng.gen_range(cfg.num_objects_min..=cfg.num_objects_max.max(cfg.num_objects_min));
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            if let Some(p) = try_place(cfg, rng) {
                placed = Some(p);
                break;
            }
        }
        let Some(p) = placed else { continue };

        let stratum = cfg.stratum_of(p.boxed.z);
        let noise = &cfg.strata[stratum];
        let sigma_c = noise.sigma_corner.to_f64().unwrap_or(0.0);
        let [c0, r0, c1, r1] = p.pixel_box_clipped;
        let mut left = c0 + normal_draw::<F, _>(rng, sigma_c);
        let mut top = r0 + normal_draw::<F, _>(rng, sigma_c);
        let mut right = c1 + normal_draw::<F, _>(rng, sigma_c);
        let mut bottom = r1 + normal_draw::<F, _>(rng, sigma_c);
        let depth_noise = normal_draw::<F, _>(rng, noise.sigma_depth.to_f64().unwrap_or(0.0));

        left = left.max(F::zero()).min(cal.img_w);
        right = right.max(F::zero()).min(cal.img_w);
        top = top.max(F::zero()).min(cal.img_h);
        bottom = bottom.max(F::zero()).min(cal.img_h);
        if right - left < real::<F>(2.0) || bottom - top < real::<F>(2.0) {
            // fall back to the noise-free box rather than shipping a sliver
            left = c0;
            top = r0;
            right = c1;
            bottom = r1;
        }
        let noisy_depth = (p.boxed.z + depth_noise).max(real::<F>(1.0));

        let category = category_of(p.class_idx);
        let truth_label = label_from_parts(
            category,
            p.truncated,
            p.occluded,
            &p.boxed,
            Bbox2D {
                left: c0,
                top: r0,
                right: c1,
                bottom: r1,
            },
            p.boxed.z,
        );
        let label = label_from_parts(
            category,
            p.truncated,
            p.occluded,
            &p.boxed,
            Bbox2D {
                left,
                top,
                right,
                bottom,
            },
            noisy_depth,
        );
        let difficulty = assign_difficulty(&label, label.pixel_height());
        objects.push(SynthObject {
            truth_box: p.boxed,
            truth_label,
            label,
            difficulty,
            stratum,
        });
    }
    if objects.is_empty() {
        return Err(SynthError::EmptyScene(ATTEMPTS));
    }
    Ok(SynthScene {
        objects,
        calib: cal,
    })
}

/// An in-memory dataset: scenes plus the shared generation settings needed
/// to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub scenes: Vec<SynthScene<F>>,
    pub num_classes: usize,
}

/// RNG stream for scene `index` under the root `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Generates `n_scenes` scenes; when `out_dir` is given, writes the KITTI
/// tree (`label_2/`, `calib/`), the noise-free `truth/` labels, `meta.csv`
/// with per-object stratum ids and `manifest.txt`.
pub fn gen_dataset<F: Real>(
    n_scenes: usize,
    cfg: &SceneConfig<F>,
    out_dir: Option<&Path>,
) -> Result<Dataset<F>, SynthError> {
    assert!(n_scenes >= 1);
    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let mut rng = scene_rng(cfg.seed, i as u64);
        scenes.push(gen_scene(cfg, &mut rng)?);
    }
    let dataset = Dataset {
        scenes,
        num_classes: cfg.num_classes(),
    };
    if let Some(dir) = out_dir {
        write_dataset(&dataset, cfg, dir)?;
    }
    Ok(dataset)
}

fn write_dataset<F: Real>(
    dataset: &Dataset<F>,
    cfg: &SceneConfig<F>,
    dir: &Path,
) -> Result<(), SynthError> {
    let label_dir = dir.join("label_2");
    let calib_dir = dir.join("calib");
    let truth_dir = dir.join("truth");
    fs::create_dir_all(&label_dir)?;
    fs::create_dir_all(&calib_dir)?;
    fs::create_dir_all(&truth_dir)?;

    let mut meta = String::from("scene,object,stratum,difficulty\n");
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let stem = format!("{i:06}.txt");
        let labels: Vec<ObjectLabel<F>> = scene.objects.iter().map(|o| o.label.clone()).collect();
        fs::write(label_dir.join(&stem), serialize_label_file(&labels))?;
        let truths: Vec<ObjectLabel<F>> =
            scene.objects.iter().map(|o| o.truth_label.clone()).collect();
        fs::write(truth_dir.join(&stem), serialize_label_file(&truths))?;
        fs::write(calib_dir.join(&stem), serialize_calib(&scene.calib))?;
        for (j, obj) in scene.objects.iter().enumerate() {
            meta.push_str(&format!(
                "{i},{j},{},{}\n",
                obj.stratum,
                obj.difficulty.as_str()
            ));
        }
    }
    fs::write(dir.join("meta.csv"), meta)?;

    let g = |v: F| v.to_f64().unwrap_or(f64::NAN);
    let manifest = format!(
        "seed = {}\nscenes = {}\nnum_classes = {}\nimg_w = {}\nimg_h = {}\ndepth_min = {}\ndepth_max = {}\nstrata = {}\n",
        cfg.seed,
        dataset.scenes.len(),
        cfg.num_classes(),
        g(cfg.camera.img_w),
        g(cfg.camera.img_h),
        g(cfg.depth_min),
        g(cfg.depth_max),
        cfg.strata.len(),
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reloads a dataset written by [`gen_dataset`]. Difficulty is reassigned
/// from the observed labels; strata come from `meta.csv`.
pub fn load_dataset<F: Real>(dir: &Path) -> Result<Dataset<F>, SynthError> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let kv = crate::config::parse_kv(&manifest)
        .map_err(|e| SynthError::BadManifest(e.to_string()))?;
    let get = |key: &str| -> Result<f64, SynthError> {
        kv.get(key)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| SynthError::BadManifest(format!("missing key '{key}'")))
    };
    let n_scenes = get("scenes")? as usize;
    let num_classes = get("num_classes")? as usize;
    let img_w = real::<F>(get("img_w")?);
    let img_h = real::<F>(get("img_h")?);

    let meta_text = fs::read_to_string(dir.join("meta.csv"))?;
    let mut strata_by_key = std::collections::BTreeMap::new();
    for line in meta_text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            return Err(SynthError::BadManifest("short meta row".into()));
        }
        let scene: usize = cols[0]
            .parse()
            .map_err(|_| SynthError::BadManifest("bad meta scene".into()))?;
        let object: usize = cols[1]
            .parse()
            .map_err(|_| SynthError::BadManifest("bad meta object".into()))?;
        let stratum: usize = cols[2]
            .parse()
            .map_err(|_| SynthError::BadManifest("bad meta stratum".into()))?;
        strata_by_key.insert((scene, object), stratum);
    }

    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let stem = format!("{i:06}.txt");
        let calib_text = fs::read_to_string(dir.join("calib").join(&stem))?;
        let calib = parse_calib::<F>(&calib_text, img_w, img_h)?;
        let labels = parse_label_file::<F>(&fs::read_to_string(dir.join("label_2").join(&stem))?)?;
        let truths = parse_label_file::<F>(&fs::read_to_string(dir.join("truth").join(&stem))?)?;
        if labels.len() != truths.len() {
            return Err(SynthError::BadManifest(format!(
                "scene {i}: label/truth count mismatch"
            )));
        }
        let mut objects = Vec::with_capacity(labels.len());
        for (j, (label, truth_label)) in labels.into_iter().zip(truths).enumerate() {
            let truth_box = Box3D::new(
                truth_label.loc[0],
                truth_label.loc[1],
                truth_label.loc[2],
                truth_label.dims[0],
                truth_label.dims[1],
                truth_label.dims[2],
                truth_label.rotation_y,
            )?;
            let stratum = *strata_by_key
                .get(&(i, j))
                .ok_or_else(|| SynthError::BadManifest(format!("no meta for ({i},{j})")))?;
            let difficulty = assign_difficulty(&label, label.pixel_height());
            objects.push(SynthObject {
                truth_box,
                truth_label,
                label,
                difficulty,
                stratum,
            });
        }
        scenes.push(SynthScene { objects, calib });
    }
    Ok(Dataset {
        scenes,
        num_classes,
    })
}

/// Normalized projected box of an object's truth geometry.
pub fn truth_projected_box<F: Real>(
    obj: &SynthObject<F>,
    cal: &CameraCalib<F>,
) -> Result<ProjectedBox<F>, SynthError> {
    Ok(crate::geometry::project_box3d(&obj.truth_box, cal)?)
}
