//! Property tests for the invariants the exact merge rests on.

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatdist::cameras::{cameras_to_json, parse_cameras, NamedCamera};
use splatdist::engine::{merge, render_partitioned, Gating, MergeOrder, PartialImage};
use splatdist::optim::OwnedSplat;
use splatdist::partition::{assign_subsets, build_kdtree, qualifies};
use splatdist::protocol::{read_frame, Message};
use splatdist::raster::render_view;
use splatdist::{Camera, RenderSettings, Splat};

fn scene(seed: u64, n: usize) -> Vec<Splat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mu = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let mut s = Splat::isotropic(i as u64, mu, 0.05, rng.random_range(0.05..0.95), [rng.random(), rng.random(), rng.random()]);
            s.log_scale = Vector3::from_fn(|_, _| rng.random_range(-4.5..-1.8));
            s.rotation = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            s
        })
        .collect()
}

fn orbit(seed: u64, width: u32, height: u32) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let z = rng.random_range(-1.5..1.5);
    let eye = Vector3::new(3.2 * a.cos(), 3.2 * a.sin(), z);
    Camera::look_at(width, height, 0.9 * width as f64, eye, Vector3::zeros(), Vector3::z()).unwrap()
}

fn points() -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 16..300)
        .prop_map(|v| v.into_iter().map(Vector3::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kd_leaves_tile_space(centers in points(), depth in 0u32..4, probes in prop::collection::vec(prop::array::uniform3(-12.0f64..12.0), 64)) {
        let table = build_kdtree(&centers, depth).unwrap();
        prop_assert_eq!(table.len(), 1 << depth);
        for p in probes.iter().map(|p| Vector3::from(*p)).chain(centers.iter().copied()) {
            let inside = table.subspaces.iter().filter(|s| s.contains(&p)).count();
            prop_assert_eq!(inside, 1, "{:?}", p);
        }
    }

    #[test]
    fn kd_leaf_spread_is_at_most_one(centers in points(), depth in 1u32..4) {
        let table = build_kdtree(&centers, depth).unwrap();
        let mut counts = vec![0usize; table.len()];
        for c in &centers {
            counts[table.locate(c)] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "{:?}", counts);
    }

    #[test]
    fn membership_holds_home_and_qualifiers(seed in any::<u64>(), depth in 1u32..4) {
        let splats = scene(seed, 200);
        let centers: Vec<_> = splats.iter().map(|s| s.mu).collect();
        let m = RenderSettings::default().reach_multiplier;
        let table = assign_subsets(build_kdtree(&centers, depth).unwrap(), &splats, m);
        for s in &splats {
            let home = table.locate(&s.mu);
            prop_assert!(table.membership[home].binary_search(&s.id).is_ok());
            for (k, sub) in table.subspaces.iter().enumerate() {
                prop_assert_eq!(table.membership[k].binary_search(&s.id).is_ok(), qualifies(s, sub, m));
            }
        }
    }

    #[test]
    fn merge_is_associative(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (5u32, 3u32);
        let n = (w * h) as usize;
        let partials: Vec<PartialImage<f64>> = (0..k)
            .map(|k| PartialImage {
                k,
                view_id: 0,
                width: w,
                height: h,
                color: (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect(),
                transmittance: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        let order: Vec<usize> = (0..k).collect();
        let bg = Vector3::new(0.25, 0.5, 0.75);
        let all = merge(&partials, &MergeOrder::uniform(w, h, &order), &bg).unwrap();

        // Fold the first two into one partial, then merge the rest.
        let (a, b) = (&partials[0], &partials[1]);
        let mut front = a.clone();
        for i in 0..n {
            for c in 0..3 {
                front.color[3 * i + c] = a.color[3 * i + c] + a.transmittance[i] * b.color[3 * i + c];
            }
            front.transmittance[i] = a.transmittance[i] * b.transmittance[i];
        }
        let mut rest = vec![front];
        rest.extend(partials[2..].iter().cloned());
        let ks: Vec<usize> = rest.iter().map(|p| p.k).collect();
        let folded = merge(&rest, &MergeOrder::uniform(w, h, &ks), &bg).unwrap();
        for (x, y) in all.color.iter().zip(&folded.color) {
            prop_assert!((x - y).abs() <= 1e-14);
        }
        for (x, y) in all.transmittance.iter().zip(&folded.transmittance) {
            prop_assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn frames_round_trip(ids in prop::collection::vec(any::<u64>(), 0..40), step in any::<u64>(), lr in -1e3f64..1e3, seed in any::<u64>()) {
        let splats: Vec<OwnedSplat> = scene(seed, 3).into_iter().map(OwnedSplat::fresh).collect();
        let reach: Vec<(u64, u32)> = ids.iter().map(|&i| (i, (i % 7) as u32)).collect();
        for m in [
            Message::GradRequest { ids: ids.clone() },
            Message::FetchSplats { ids: ids.clone() },
            Message::Step { step, lr_position: lr },
            Message::Stepped { k: 3, reach },
            Message::Adopt { splats: splats.clone() },
            Message::Snapshot { k: 1, splats },
        ] {
            let frame = m.encode();
            let body = read_frame(&mut frame.as_slice()).unwrap().unwrap();
            prop_assert_eq!(Message::decode(&body).unwrap(), m);
        }
    }

    #[test]
    fn camera_json_round_trip_is_exact(seed in any::<u64>(), w in 1u32..4000, h in 1u32..4000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let t = Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0));
        let cam = Camera::new(w, h, rng.random_range(1.0..5e3), rng.random_range(1.0..5e3), w as f64 / 2.0, h as f64 / 2.0, q, t).unwrap();
        let named = vec![NamedCamera { name: format!("v{seed}"), camera: cam }];
        let text = serde_json::to_string(&cameras_to_json(&named)).unwrap();
        let back = parse_cameras(&serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back, named);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn merged_render_matches_single_worker(seed in any::<u64>(), depth in 1u32..4) {
        let splats = scene(seed, 300);
        let centers: Vec<_> = splats.iter().map(|s| s.mu).collect();
        let s = RenderSettings::oracle();
        let table = assign_subsets(build_kdtree(&centers, depth).unwrap(), &splats, s.reach_multiplier);
        let cam = orbit(seed ^ 0x5eed, 40, 28);
        let bg = Vector3::new(0.1, 0.2, 0.3);
        let mono = render_view::<f64>(&splats, &cam, &bg, &s);
        let (dist, _) = render_partitioned::<f64>(&splats, &table, &cam, &bg, &s, Gating::Indicator).unwrap();
        for (x, y) in mono.color.iter().zip(&dist.color) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn render_is_independent_of_thread_count(seed in any::<u64>()) {
        let splats = scene(seed, 400);
        let cam = orbit(seed, 36, 30);
        let bg = Vector3::new(0.0, 0.0, 0.0);
        let s = RenderSettings::default();
        let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let one = pool(1).install(|| render_view::<f32>(&splats, &cam, &bg, &s));
        let three = pool(3).install(|| render_view::<f32>(&splats, &cam, &bg, &s));
        prop_assert!(one.color == three.color && one.transmittance == three.transmittance);
    }
}
