use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{SceneKind, SceneRenderer, SyntheticScene};
use crate::backbone::BackboneConfig;
use crate::distill::{make_token_mask, TargetMask};
use crate::error::{invalid, Result};
use crate::head::BBox;
use crate::imaging::ImageCrop;
use crate::objective::{make_target_maps, TargetMaps};
use crate::tracker::CropRegion;

/// One training triplet: two template crops, a search crop, and the
/// supervision derived from the search-crop box.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub templates: [ImageCrop; 2],
    pub search: ImageCrop,
    /// Target in normalized search-crop coordinates.
    pub gt: BBox,
    pub mask: TargetMask,
    pub targets: TargetMaps,
}

impl TrainSample {
    pub fn template_refs(&self, two_templates: bool) -> Vec<&ImageCrop> {
        if two_templates {
            vec![&self.templates[0], &self.templates[1]]
        } else {
            vec![&self.templates[0]]
        }
    }
}

/// Crop jitter and photometric augmentation applied while building samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub search_factor: f64,
    pub template_factor: f64,
    /// Maximum center shift as a fraction of the search side.
    pub center_jitter: f64,
    /// Maximum absolute log-scale jitter of the search side.
    pub scale_jitter: f64,
    pub flip_probability: f64,
    /// Brightness gains are drawn from `[1 − b, 1 + b]`.
    pub brightness: f64,
    /// Largest frame gap between the template and search frames.
    pub max_gap: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            search_factor: 4.0,
            template_factor: 2.0,
            center_jitter: 0.2,
            scale_jitter: 0.15,
            flip_probability: 0.5,
            brightness: 0.2,
            max_gap: 40,
        }
    }
}

fn visible_frames(scene: &SyntheticScene) -> Vec<usize> {
    (0..scene.frames).filter(|&t| !scene.is_occluded(t)).collect()
}

/// Samples one triplet from a scene.
pub fn sample_triplet(renderer: &SceneRenderer, scene: &SyntheticScene, model: &BackboneConfig, aug: &Augment, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let visible = visible_frames(scene);
    if visible.is_empty() {
        return Err(invalid("scene has no unoccluded frame"));
    }
    let pick = |rng: &mut ChaCha8Rng, around: Option<usize>| -> usize {
        let cands: Vec<usize> = match around {
            None => visible.clone(),
            Some(c) => visible.iter().copied().filter(|&t| t.abs_diff(c) <= aug.max_gap).collect(),
        };
        cands[rng.gen_range(0..cands.len())]
    };
    let t_search = pick(rng, None);
    let t_z0 = pick(rng, Some(t_search));
    let t_z1 = pick(rng, Some(t_search));

    let template = |t: usize| -> Result<ImageCrop> {
        CropRegion::around(&scene.target_box(t), aug.template_factor).sample(&renderer.render(t)?, model.template_size)
    };
    let mut z0 = template(t_z0)?;
    let mut z1 = template(t_z1)?;

    let gt_frame = scene.target_box(t_search);
    let base = CropRegion::around(&gt_frame, aug.search_factor);
    let side = base.side * rng.gen_range(-aug.scale_jitter..=aug.scale_jitter).exp();
    let shift = aug.center_jitter * side;
    let region = CropRegion {
        cx: base.cx + rng.gen_range(-shift..=shift),
        cy: base.cy + rng.gen_range(-shift..=shift),
        side,
    };
    let mut search = region.sample(&renderer.render(t_search)?, model.search_size)?;
    let mut gt = region.to_crop(&gt_frame);

    if rng.gen_bool(aug.flip_probability) {
        z0 = z0.flip_horizontal();
        z1 = z1.flip_horizontal();
        search = search.flip_horizontal();
        gt = gt.flipped();
    }
    let gain = rng.gen_range(1.0 - aug.brightness..=1.0 + aug.brightness);
    let (z0, z1, search) = (z0.with_brightness(gain), z1.with_brightness(gain), search.with_brightness(gain));

    let grid = model.search_grid();
    Ok(TrainSample {
        templates: [z0, z1],
        search,
        mask: make_token_mask(&gt, grid, grid)?,
        targets: make_target_maps(&gt, grid, grid)?,
        gt,
    })
}

/// Seeded training set drawn from a mix of plain, occlusion and clutter scenes.
pub fn build_training_set(model: &BackboneConfig, samples: usize, seed: u64) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = Augment::default();
    let kinds = [SceneKind::Plain, SceneKind::Occlusion, SceneKind::Clutter];
    let per_scene = 8;
    let mut out = Vec::with_capacity(samples);
    let mut scene_id = 0u64;
    while out.len() < samples {
        let scene = SyntheticScene::random(seed.wrapping_mul(1_000_003).wrapping_add(scene_id), kinds[scene_id as usize % 3], 120);
        let renderer = SceneRenderer::new(&scene)?;
        for _ in 0..per_scene.min(samples - out.len()) {
            out.push(sample_triplet(&renderer, &scene, model, &aug, &mut rng)?);
        }
        scene_id += 1;
    }
    Ok(out)
}
