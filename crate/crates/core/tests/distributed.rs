//! Worker clusters over in-process links against the single-worker paths.

use splatdist::manager::{run_manager, ClusterConfig};
use splatdist::partition::{assign_subsets, build_kdtree};
use splatdist::protocol::Precision;
use splatdist::raster::render_view;
use splatdist::synth::{synth_scene, SynthSpec};
use splatdist::trainer::{init_from_pointcloud, train, TrainConfig};
use splatdist::RenderSettings;

fn spec(splats: usize) -> SynthSpec {
    SynthSpec {
        splats,
        points: splats,
        views: 8,
        width: 32,
        height: 32,
        focal: 36.0,
        ..Default::default()
    }
}

#[test]
fn cluster_render_matches_monolithic() {
    let (scene, gt) = synth_scene(&spec(800), 1).unwrap();
    let settings = RenderSettings::oracle();
    let centers: Vec<_> = gt.iter().map(|s| s.mu).collect();
    let table = assign_subsets(build_kdtree(&centers, 2).unwrap(), &gt, settings.reach_multiplier);
    let cams: Vec<_> = scene.cameras.iter().map(|c| c.camera.clone()).collect();
    let cfg = ClusterConfig::new(settings.clone(), Precision::F64);
    let out = run_manager::<f64>(&gt, &cams, table, &scene.background(), &cfg).unwrap();
    for (img, cam) in out.images.iter().zip(&cams) {
        let mono = render_view::<f64>(&gt, cam, &scene.background(), &settings);
        let d = img.color.iter().zip(&mono.color).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-9, "{d}");
    }
    let per_view = 4 * 32 * 32 * 4 * 8;
    let received: u64 = out.counters.iter().map(|c| c.map_bytes_received).sum();
    assert_eq!(received, per_view * cams.len() as u64);
}

#[test]
fn synced_training_tracks_monolithic() {
    let (scene, _) = synth_scene(&spec(400), 2).unwrap();
    let init = init_from_pointcloud(&scene.points, 400, 0, 2).unwrap();
    let base = TrainConfig {
        iterations: 30,
        precision: Precision::F64,
        settings: RenderSettings::oracle(),
        grad_sync: true,
        repartition_interval: 1,
        log_interval: 10,
        ..Default::default()
    };
    let mono = train(&scene, init.clone(), &base, None).unwrap();
    let dist = train(&scene, init, &TrainConfig { workers: Some(4), ..base }, None).unwrap();
    assert_eq!(dist.splats.len(), 400);
    assert!(!dist.repartitions.is_empty());
    assert_eq!(dist.replica_divergence, 0.0);
    for (a, b) in mono.losses.iter().zip(&dist.losses) {
        assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
    }
    assert!(mono.losses.last() < mono.losses.first());
}

#[test]
fn splats_growing_into_a_neighbor_are_adopted() {
    use nalgebra::Vector3;
    use splatdist::grad::SplatGrad;
    use splatdist::manager::Cluster;
    use splatdist::optim::OwnedSplat;
    use splatdist::partition::from_plane;
    use splatdist::Splat;

    let settings = RenderSettings::oracle();
    let near = Splat::isotropic(0, Vector3::new(-0.1, 0.0, 0.0), 0.01, 0.5, [0.5; 3]);
    let far = Splat::isotropic(1, Vector3::new(-2.0, 0.0, 0.0), 0.01, 0.5, [0.5; 3]);
    let splats = vec![near.clone(), far];
    let table = assign_subsets(from_plane(Vector3::x(), 0.0), &splats, settings.reach_multiplier);
    let counts = |t: &splatdist::partition::PartitionTable| t.membership.iter().map(Vec::len).sum::<usize>();
    assert_eq!(counts(&table), 2);

    let mut cluster = Cluster::launch(2, &ClusterConfig::new(settings, Precision::F64)).unwrap();
    cluster.install(table, &splats.into_iter().map(OwnedSplat::fresh).collect::<Vec<_>>()).unwrap();
    // A pull toward +x: the first Adam step moves the center by the full rate.
    let mut g = SplatGrad::zeros_like(&near);
    g.mu.x = -1.0;
    let home = cluster.table.locate(&near.mu);
    cluster.set_grads(home, vec![g]).unwrap();
    assert_eq!(cluster.step(1, 0.2).unwrap(), 1);
    assert_eq!(counts(&cluster.table), 3);
    let snaps = cluster.snapshot().unwrap();
    assert!(snaps.iter().all(|s| s.iter().any(|o| o.splat.id == 0)));
    assert_eq!(Cluster::replica_divergence(&snaps), 0.0);
    assert_eq!(cluster.step(2, 0.0).unwrap(), 0);
    cluster.shutdown().unwrap();
}
