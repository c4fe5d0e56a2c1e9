//! Visibility-based occupancy labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Ray, SceneSample, SynthError, Vec3};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyQuery {
    pub position: Vec3,
    /// 1 on the surface band, 0 in observed free space.
    pub occupied: u8,
    pub source_ray: Option<usize>,
}

/// Label of a point at distance `d` along a ray that hits at `hit`; `None`
/// past the surface band, where the sensor saw nothing.
pub fn query_label(d: f64, hit: f64, delta: f64) -> Option<u8> {
    let half = delta / 2.0;
    if d < hit - half {
        Some(0)
    } else if d <= hit + half {
        Some(1)
    } else {
        None
    }
}

/// Draws `n_queries` labelled points along the scene's LiDAR rays.
///
/// Distances are uniform on `[0, hit + delta]`; draws past the band are
/// rejected, and each label is filled up to half the budget. If the
/// rejection budget runs out the remainder is filled with whatever label
/// comes next and a warning is logged.
pub fn sample_occupancy_queries(sample: &SceneSample, n_queries: usize, delta: f64, seed: u64) -> Result<Vec<OccupancyQuery>, SynthError> {
    if n_queries == 0 {
        return Err(SynthError::Contract("n_queries must be positive".into()));
    }
    if !(delta > 0.0) {
        return Err(SynthError::Contract(format!("delta {delta} must be positive")));
    }
    if sample.rays.is_empty() {
        return Err(SynthError::Contract("scene has no rays".into()));
    }
    let mut rng = rng_for(seed, "occupancy", 0);
    let quota = [n_queries - n_queries / 2, n_queries / 2];
    let mut counts = [0usize; 2];
    let mut out = Vec::with_capacity(n_queries);
    let budget = 400 * n_queries;
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> OccupancyQuery {
        loop {
            let i = rng.random_range(0..sample.rays.len());
            let ray: &Ray = &sample.rays[i];
            let d = rng.random_range(0.0..ray.hit_distance + delta);
            if let Some(label) = query_label(d, ray.hit_distance, delta) {
                return OccupancyQuery { position: ray.at(d), occupied: label, source_ray: Some(i) };
            }
        }
    };
    for _ in 0..budget {
        if out.len() == n_queries {
            break;
        }
        let q = draw(&mut rng);
        let l = q.occupied as usize;
        if counts[l] < quota[l] {
            counts[l] += 1;
            out.push(q);
        }
    }
    if out.len() < n_queries {
        log::warn!("occupancy labels could not be balanced ({} free, {} occupied); filling unbalanced", counts[0], counts[1]);
        while out.len() < n_queries {
            out.push(draw(&mut rng));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, raycast, SceneConfig};

    #[test]
    fn label_rule() {
        assert_eq!(query_label(5.0, 10.0, 0.2), Some(0));
        assert_eq!(query_label(10.0, 10.0, 0.2), Some(1));
        assert_eq!(query_label(10.05, 10.0, 0.2), Some(1));
        assert_eq!(query_label(10.2, 10.0, 0.2), None);
    }

    #[test]
    fn exact_count_and_balance() {
        let s = generate_scene(&SceneConfig::default(), 5).unwrap();
        let q = sample_occupancy_queries(&s, 2000, 0.2, 9).unwrap();
        assert_eq!(q.len(), 2000);
        let occ = q.iter().filter(|q| q.occupied == 1).count();
        assert!((800..=1200).contains(&occ));
        assert_eq!(q, sample_occupancy_queries(&s, 2000, 0.2, 9).unwrap());
    }

    #[test]
    fn labels_agree_with_raycast() {
        let s = generate_scene(&SceneConfig::default(), 6).unwrap();
        for q in sample_occupancy_queries(&s, 300, 0.2, 1).unwrap() {
            let ray = &s.rays[q.source_ray.unwrap()];
            let hit = raycast(ray.origin, ray.direction, &s.primitives).unwrap().unwrap();
            let d: f64 = (0..3).map(|k| (q.position[k] - ray.origin[k]) * ray.direction[k]).sum();
            assert_eq!(query_label(d, hit, 0.2), Some(q.occupied));
        }
    }

    #[test]
    fn bad_arguments() {
        let s = generate_scene(&SceneConfig::default(), 5).unwrap();
        assert!(sample_occupancy_queries(&s, 0, 0.2, 1).is_err());
        assert!(sample_occupancy_queries(&s, 10, 0.0, 1).is_err());
    }
}
