//! Oracle-driven cascade runs on randomized phantoms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spine_cascade::metrics::{evaluate_case, per_instance_dice, ID_RADIUS_MM};
use spine_cascade::phantom::{crop_phantom_fov, generate_phantom, DatasetSpec, PhantomTruth, RangeSampling};
use spine_cascade::pipeline::{
    truth_oracles, run_cascade, CascadeParams, CascadeResult, Stage2Params,
};
use spine_cascade::volume::VoxelBox;

/// Random label window containing a region boundary, random spacing in [1, 2]
/// mm per axis, and a cranio-caudal field-of-view crop that keeps both
/// vertebrae of one boundary whole.
pub fn random_case(seed: u64) -> PhantomTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = DatasetSpec { ranges: Some(RangeSampling::default()), ..DatasetSpec::default() };
    let mut spec = ds.case_spec(seed, 0);
    spec.spacing = [0; 3].map(|_| rng.random_range(1.0..2.0));
    let t = generate_phantom(&spec).expect("default dataset spec is feasible");
    let classes: Vec<_> = t.anatomical.iter().map(|l| l.class()).collect();
    let boundaries: Vec<usize> = (1..classes.len()).filter(|&k| classes[k] != classes[k - 1]).collect();
    let k = boundaries[rng.random_range(0..boundaries.len())];
    // z extent of instances k (1-based, cranial side) and k + 1
    let [nx, ny, nz] = t.image.dims();
    let (mut zlo, mut zhi) = (nz, 0);
    for (i, &id) in t.instance_labels.data().iter().enumerate() {
        if id as usize == k || id as usize == k + 1 {
            let z = i / (nx * ny);
            zlo = zlo.min(z);
            zhi = zhi.max(z + 1);
        }
    }
    let lo = rng.random_range(0..=zlo);
    let hi = rng.random_range(zhi..=nz);
    crop_phantom_fov(&t, &VoxelBox::new([0, 0, lo], [nx, ny, hi]).unwrap()).unwrap()
}

/// Parameters that let the oracles cover a whole vertebra in-plane at up to 2 mm spacing.
pub fn oracle_params() -> CascadeParams {
    CascadeParams {
        stage1_window: [64; 3],
        stage2: Stage2Params { patch_dims: [112, 112, 64], min_voxels: 1, ..Stage2Params::default() },
        ..CascadeParams::default()
    }
}

pub struct OracleScore {
    pub id_rate: f64,
    pub instance_dice: Vec<f64>,
    pub max_centroid_error_mm: f64,
    pub max_spacing: f64,
    pub result: CascadeResult,
}

pub fn run_oracle(t: &PhantomTruth, params: &CascadeParams) -> OracleScore {
    let (sem, inst) = truth_oracles(&t.class_labels, &t.instance_labels, params.working_mm).unwrap();
    let result = run_cascade(&sem, &inst, &t.image, params).unwrap();
    let outcomes = evaluate_case(&result.centroid_entries(), &t.centroid_entries(), ID_RADIUS_MM).unwrap();
    let id_rate = outcomes.iter().filter(|o| o.identified).count() as f64 / outcomes.len() as f64;
    let max_centroid_error_mm = outcomes.iter().map(|o| o.error_mm.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    OracleScore {
        id_rate,
        instance_dice: per_instance_dice(&result.instance_labels, &t.instance_labels, t.num_instances()).unwrap(),
        max_centroid_error_mm,
        max_spacing: t.image.geometry().max_spacing(),
        result,
    }
}
