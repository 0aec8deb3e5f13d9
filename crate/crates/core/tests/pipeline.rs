use mov_core::commands::data::load_split;
use mov_core::commands::{self, open_manifest};
use mov_core::config::RunConfig;
use mov_core::fusion::AuxModality;
use mov_core::signalprep::flow::{estimate_flow, TvL1Config};
use mov_core::synthdata::{class_specs, render_clip, Split, WorldConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn flow_recovers_sprite_motion() {
    let world = WorldConfig {
        frames: 2,
        speed: 3.0,
        pixel_noise: 0.0,
        ..WorldConfig::default()
    };
    let specs = class_specs(8, world.speed).unwrap();
    // direction 0 moves east, 2 north, 4 west, 6 south
    for (c, want) in [(0usize, (3.0, 0.0)), (2, (0.0, -3.0)), (4, (-3.0, 0.0)), (6, (0.0, 3.0))] {
        let clip = render_clip(&specs[c], &world, 11).unwrap();
        let f = estimate_flow(&clip.frames[0], &clip.frames[1], &TvL1Config::default()).unwrap();
        let (cx, cy) = clip.centers[0];
        let r = world.sprite_size / 2.0 - 2.0;
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in 0..f.height {
            for x in 0..f.width {
                if (x as f64 + 0.5 - cx).abs() <= r && (y as f64 + 0.5 - cy).abs() <= r {
                    us.push(f.u[y * f.width + x]);
                    vs.push(f.v[y * f.width + x]);
                }
            }
        }
        let (mu, mv) = (median(us), median(vs));
        assert!((mu - want.0).abs() <= 0.5 && (mv - want.1).abs() <= 0.5, "class {c}: ({mu}, {mv})");
    }
}

#[test]
fn synth_then_preprocess_loads_every_split() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default().with_seed(2);
    cfg.synth.classes = 4;
    cfg.synth.n_base = 2;
    cfg.synth.train_per_class = 2;
    cfg.synth.test_per_class = 1;
    cfg.synth.world.frames = 6;
    cfg.synth.world.audio_seconds = 1.0;
    commands::synth(&cfg, d.path()).unwrap();
    commands::preprocess(&cfg, d.path()).unwrap();
    let (m, root) = open_manifest(d.path()).unwrap();
    assert_eq!(m.base_classes.len(), 2);
    for (split, n) in [(Split::BaseTrain, 4), (Split::BaseTest, 2), (Split::NovelTest, 2)] {
        let flow = load_split(&m, &root, split, AuxModality::Flow).unwrap();
        assert_eq!(flow.len(), n);
        assert!(flow.iter().all(|s| s.flows.len() == s.frames.len() && s.spec.is_none()));
        let audio = load_split(&m, &root, split, AuxModality::Audio).unwrap();
        let spec = audio[0].spec.as_ref().unwrap();
        assert_eq!(spec.shape()[0], 128);
        assert_eq!(spec.shape()[1], 100);
    }
}

