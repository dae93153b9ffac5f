use std::collections::BTreeMap;
use std::path::Path;

use handsplat::data::*;
use handsplat::features::ParamStore;
use handsplat::hand::{pose_mesh, HandModel};
use handsplat::interaction::{detect_interactions, DetectionConfig};
use handsplat::optimize::{ModelConfig, Refine};
use handsplat::Error;

fn small() -> DatasetConfig {
    DatasetConfig { subjects: 2, poses: 4, views: 2, width: 32, height: 32, level: 1, seed: 9, ..DatasetConfig::default() }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_bitwise_reproducible() {
    let model = HandModel::default_model(1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic_dataset(a.path(), &model, &small()).unwrap();
    gen_synthetic_dataset(b.path(), &model, &small()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.contains_key("subjects/s2/scene.txt"));
    assert_eq!(fa.len(), 2 * (2 * 8 + 2));
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    gen_synthetic_dataset(c.path(), &model, &DatasetConfig { seed: 10, ..small() }).unwrap();
    assert_ne!(files(c.path()), fa);
}

#[test]
fn frames_load_back_with_nonempty_masks() {
    let model = HandModel::default_model(1);
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic_dataset(dir.path(), &model, &small()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let mem: Vec<_> = ds.subjects.iter().flat_map(|s| s.frames.iter().map(move |f| (s.id, f))).collect();
    assert_eq!(loaded.len(), mem.len());
    for (l, (id, f)) in loaded.iter().zip(mem) {
        assert_eq!(l.subject, id);
        assert_eq!(&l.pose, &f.pose);
        let mask = l.mask.as_ref().unwrap();
        assert!(mask.iter().filter(|&&m| m > 0.0).count() > 0, "empty mask in subject {id}");
        // 8-bit quantization of the written frame
        assert!(l.rgb.iter().zip(&f.rgb).all(|(a, b)| (a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-12));
    }
}

#[test]
fn interacting_frames_are_flagged() {
    let model = HandModel::default_model(1);
    let cfg = DatasetConfig { subjects: 3, poses: 8, views: 1, ..small() };
    let ds = synthesize(&model, &cfg).unwrap();
    let mesh = model.canonical(1);
    let det = DetectionConfig::default();
    let (mut interacting, mut flagged) = (0, 0);
    for f in ds.subjects.iter().flat_map(|s| &s.frames) {
        if !f.kind.is_interacting() {
            continue;
        }
        interacting += 1;
        let posed = pose_mesh(mesh, &model.rig, &f.pose).unwrap();
        let labels = detect_interactions(&mesh.vertices, &posed.vertices, &mesh.side, &det).unwrap();
        flagged += usize::from(!labels.flagged().is_empty());
    }
    assert!(interacting > 0);
    assert!(5 * flagged >= interacting, "{flagged} of {interacting} interacting frames flagged");
}

#[test]
fn avatar_subjects_store_their_identity() {
    let mut model = ModelConfig::default();
    model.net.feature_dim = 4;
    model.net.hidden = 16;
    let av = generator_avatar(model, 0, 1, 3.0).unwrap();
    let cfg = DatasetConfig { subjects: 1, poses: 2, views: 1, level: 0, ..small() };
    let ds = synthesize_from_avatar(&av, &cfg, 3.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let store = ParamStore::load(&dir.path().join("subjects/s1").join(IDENTITY_FILE)).unwrap();
    let Appearance::Identity(id) = &ds.subjects[0].appearance else { panic!("expected an identity subject") };
    assert_eq!(store.get(IDENTITY_BLOCK).unwrap(), id);
    let f = &ds.subjects[0].frames[1];
    let frame = av.prepare(0, &f.pose, &f.camera).unwrap();
    let (_, img, _) = av.render_identity(id, None, &frame, Refine::Compute).unwrap();
    assert_eq!(img.rgb, f.rgb);
    assert_eq!(img.alpha, f.mask);
}

#[test]
fn color_gain_scales_only_color_logits() {
    let base = generator_avatar(ModelConfig::default(), 0, 2, 1.0).unwrap();
    let hot = generator_avatar(ModelConfig::default(), 0, 2, 3.0).unwrap();
    let (a, b) = (base.weights.get("head.l2.w").unwrap(), hot.weights.get("head.l2.w").unwrap());
    for r in 0..a.rows {
        for c in 0..a.cols {
            let expect = if (11..14).contains(&c) { 3.0 * a.at(r, c) } else { a.at(r, c) };
            assert_eq!(b.at(r, c), expect);
        }
    }
}

#[test]
fn unknown_scene_version_is_rejected() {
    let mut s = SceneFile::new(1);
    s.scene_version = 2;
    let text = s.to_toml().unwrap();
    assert!(matches!(SceneFile::parse(&text), Err(Error::Version { .. })));
}
