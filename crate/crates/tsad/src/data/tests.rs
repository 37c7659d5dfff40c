use super::render::SampleParamsInner;
use super::*;
use crate::detector::BBox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(kind: DatasetKind, count: usize, seed: u64, split: &str) -> DatasetSpec {
    DatasetSpec { kind, count, seed, split: split.into() }
}

#[test]
fn detection_generation_contract() {
    let dir = tempfile::tempdir().unwrap();
    let manifest =
        generate_dataset(dir.path(), &spec(DatasetKind::Detection, 10, 7, "train")).unwrap();
    assert_eq!(manifest.count, 10);
    assert!(manifest.has_boxes && manifest.has_flow);
    let ds = Dataset::load(dir.path()).unwrap();
    for i in 0..ds.len() {
        let s = ds.video(i).unwrap();
        assert_eq!(s.frame_count, FRAMES);
        let boxes = s.boxes.as_ref().unwrap();
        assert_eq!(boxes.len(), FRAMES);
        for b in boxes {
            b.validate().unwrap();
            let (x0, y0, x1, y1) = b.corners();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0, "{b:?}");
        }
        assert_eq!(s.flow.as_ref().unwrap().len(), (FRAMES - 1) * 2 * SIDE * SIDE);
    }
}

#[test]
fn move_right_speed_two_has_exact_flow() {
    let params = SampleParamsInner {
        class: MotionClass::MoveRight,
        shape: render::ShapeKind::Disc,
        radius: 8.0,
        speed: 2.0,
        start: (12.0, 32.0),
        orbit_radius: 0.0,
        phase: 0.0,
        pulse_amp: 0.0,
        actor_color: [0.9, 0.2, 0.2],
        bg_seed: 3,
        bg_tint: [1.0, 1.0, 1.0],
        bg_blur: 2,
        bg_range: (0.1, 0.6),
    };
    let r = render_video(&params, FRAMES);
    let plane = SIDE * SIDE;
    for t in 0..FRAMES - 1 {
        let u = &r.flow[t * 2 * plane..t * 2 * plane + plane];
        let v = &r.flow[t * 2 * plane + plane..(t + 1) * 2 * plane];
        let moving: Vec<usize> =
            (0..plane).filter(|&i| u[i] != 0.0 || v[i] != 0.0).collect();
        assert!(!moving.is_empty());
        for &i in &moving {
            assert_eq!(u[i], 2.0, "u at pixel {i} pair {t}");
            assert_eq!(v[i], 0.0, "v at pixel {i} pair {t}");
        }
        // roughly a disc worth of pixels
        let area = std::f32::consts::PI * 8.0 * 8.0;
        assert!((moving.len() as f32) > 0.8 * area && (moving.len() as f32) < 1.2 * area);
    }
}

#[test]
fn generation_is_deterministic_and_parallel_safe() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let sp = spec(DatasetKind::Detection, 6, 42, "train");
    generate_dataset(d1.path(), &sp).unwrap();
    // serial run via a single-thread pool must match the default pool
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| generate_dataset(d2.path(), &sp)).unwrap();
    let b1 = std::fs::read(d1.path().join("data.bin")).unwrap();
    let b2 = std::fs::read(d2.path().join("data.bin")).unwrap();
    assert_eq!(b1, b2);

    // different split, same seed -> different bytes
    let d3 = tempfile::tempdir().unwrap();
    generate_dataset(d3.path(), &spec(DatasetKind::Detection, 6, 42, "test")).unwrap();
    let b3 = std::fs::read(d3.path().join("data.bin")).unwrap();
    assert_ne!(b1, b3);
}

#[test]
fn static_boxes_match_rasterization() {
    // oracle: pixels that change when the actor color changes are exactly
    // the actor's support; its tight bounds must match the stored box +-1px
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for shape in render::ShapeKind::ALL {
        let mut params = super::gen::random_params(
            &mut rng,
            DatasetKind::Static,
            MotionClass::MoveRight,
            shape,
        );
        params.actor_color = [1.0, 0.0, 0.0];
        let a = render_video(&params, 1);
        let mut params_b = params.clone();
        params_b.actor_color = [0.0, 0.0, 1.0];
        let b = render_video(&params_b, 1);
        let plane = SIDE * SIDE;
        let (mut x0, mut y0, mut x1, mut y1) = (SIDE, SIDE, 0usize, 0usize);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let differs = (0..CHANNELS)
                    .any(|c| (a.frames[c * plane + y * SIDE + x] - b.frames[c * plane + y * SIDE + x]).abs() > 1e-6);
                if differs {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        let stored = a.boxes[0];
        let side = SIDE as f32;
        let (sx0, sy0, sx1, sy1) = stored.corners();
        assert!((sx0 * side - x0 as f32).abs() <= 1.0, "{shape:?} x0 {} vs {}", sx0 * side, x0);
        assert!((sy0 * side - y0 as f32).abs() <= 1.0, "{shape:?} y0 {} vs {}", sy0 * side, y0);
        assert!((sx1 * side - x1 as f32).abs() <= 1.0, "{shape:?} x1 {} vs {}", sx1 * side, x1);
        assert!((sy1 * side - y1 as f32).abs() <= 1.0, "{shape:?} y1 {} vs {}", sy1 * side, y1);
    }
}

#[test]
fn shape_and_class_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest =
        generate_dataset(dir.path(), &spec(DatasetKind::Detection, 480, 11, "train")).unwrap();
    // chi-square contingency test, df = (6-1)(3-1) = 10
    let mut table = [[0.0f64; 3]; 6];
    for (c, s) in manifest.class_ids.iter().zip(&manifest.shape_ids) {
        table[*c as usize][*s as usize] += 1.0;
    }
    let n: f64 = 480.0;
    let row: Vec<f64> = (0..6).map(|i| table[i].iter().sum()).collect();
    let col: Vec<f64> = (0..3).map(|j| (0..6).map(|i| table[i][j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..6 {
        for j in 0..3 {
            let e = row[i] * col[j] / n;
            if e > 0.0 {
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
    }
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let p = 1.0 - ChiSquared::new(10.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
}

#[test]
fn recognition_dataset_has_no_boxes_and_balanced_labels() {
    let dir = tempfile::tempdir().unwrap();
    let manifest =
        generate_dataset(dir.path(), &spec(DatasetKind::Recognition, 100, 3, "train")).unwrap();
    assert!(!manifest.has_boxes && !manifest.has_flow);
    let ds = Dataset::load(dir.path()).unwrap();
    let s = ds.video(0).unwrap();
    assert!(s.boxes.is_none() && s.flow.is_none());
    let mut hist = [0usize; 6];
    for &c in &manifest.class_ids {
        hist[c as usize] += 1;
    }
    let expect = 100.0 / 6.0;
    for (i, &h) in hist.iter().enumerate() {
        assert!(
            (h as f64 - expect).abs() / expect <= 0.2,
            "class {i} count {h} outside 20% of {expect}"
        );
    }
}

#[test]
fn load_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("manifest.json"), "{err}");

    // corrupt one stored box to sit outside the unit square
    let sp = spec(DatasetKind::Static, 3, 1, "train");
    generate_dataset(dir.path(), &sp).unwrap();
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
    )
    .unwrap();
    let mut blob = std::fs::read(dir.path().join("data.bin")).unwrap();
    let rec1 = manifest.offsets[1] as usize;
    let frame_len = CHANNELS * SIDE * SIDE;
    let box_at = rec1 + 4 + frame_len + 2; // header + frames + class
    blob[box_at..box_at + 4].copy_from_slice(&5.0f32.to_le_bytes());
    std::fs::write(dir.path().join("data.bin"), &blob).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("record 1"), "{err}");
}

#[test]
fn roundtrip_reload_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let sp = spec(DatasetKind::Detection, 4, 9, "test");
    generate_dataset(dir.path(), &sp).unwrap();
    let a = Dataset::load(dir.path()).unwrap();
    let b = load_external(dir.path()).unwrap();
    for i in 0..a.len() {
        let sa = a.video(i).unwrap();
        let sb = b.video(i).unwrap();
        assert_eq!(sa.frames, sb.frames);
        assert_eq!(sa.class_id, sb.class_id);
        assert_eq!(sa.flow, sb.flow);
    }
}

fn demo_pair() -> FramePair {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = super::gen::random_params(
        &mut rng,
        DatasetKind::Detection,
        MotionClass::Zigzag,
        render::ShapeKind::Square,
    );
    let r = render_video(&params, 2);
    let frame_len = CHANNELS * SIDE * SIDE;
    FramePair {
        frame_a: r.frames[..frame_len].to_vec(),
        frame_b: r.frames[frame_len..2 * frame_len].to_vec(),
        rect: r.boxes[0],
        class_id: MotionClass::Zigzag.id(),
        flow: Some(r.flow[..2 * SIDE * SIDE].to_vec()),
    }
}

#[test]
fn hflip_is_an_involution_and_reflects_cx() {
    let p = demo_pair();
    let f = augment::hflip_pair(&p);
    assert!((f.rect.cx - (1.0 - p.rect.cx)).abs() < 1e-6);
    assert_eq!(f.rect.cy, p.rect.cy);
    let ff = augment::hflip_pair(&f);
    assert_eq!(ff.frame_a, p.frame_a);
    assert_eq!(ff.frame_b, p.frame_b);
    // 1 - (1 - cx) can round by one ulp in f32
    assert!((ff.rect.cx - p.rect.cx).abs() <= f32::EPSILON);
    assert_eq!((ff.rect.cy, ff.rect.w, ff.rect.h), (p.rect.cy, p.rect.w, p.rect.h));
    assert_eq!(ff.flow, p.flow);

    // flipped flow negates u inside the (mirrored) actor support
    let plane = SIDE * SIDE;
    let fu = &f.flow.as_ref().unwrap()[..plane];
    let pu = &p.flow.as_ref().unwrap()[..plane];
    for y in 0..SIDE {
        for x in 0..SIDE {
            assert_eq!(fu[y * SIDE + x], -pu[y * SIDE + (SIDE - 1 - x)]);
        }
    }
}

#[test]
fn photometric_only_keeps_geometry() {
    let p = demo_pair();
    let cfg = AugmentConfig { flip_prob: 0.0, crop_min_scale: 1.0, brightness: 0.2, saturation: 0.2 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = augment(&p, &cfg, &mut rng);
    assert_eq!(a.rect, p.rect);
    assert_eq!(a.flow, p.flow);
    assert_ne!(a.frame_a, p.frame_a);
}

#[test]
fn crop_keeps_actor_visible() {
    let p = demo_pair();
    let cfg = AugmentConfig::default();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment(&p, &cfg, &mut rng);
        let (x0, y0, x1, y1) = a.rect.corners();
        assert!(x0 >= -1e-4 && y0 >= -1e-4 && x1 <= 1.0 + 1e-4 && y1 <= 1.0 + 1e-4);
        a.rect.validate().unwrap();
    }
}

#[test]
fn boxes_stay_inside_canvas_for_all_classes() {
    // trajectory safety sweep across classes, shapes and seeds
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for class in MotionClass::ALL {
        for shape in render::ShapeKind::ALL {
            for _ in 0..5 {
                let params =
                    super::gen::random_params(&mut rng, DatasetKind::Recognition, class, shape);
                let r = render_video(&params, FRAMES);
                for (t, b) in r.boxes.iter().enumerate() {
                    let (x0, y0, x1, y1) = b.corners();
                    assert!(
                        x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0,
                        "{class:?} {shape:?} frame {t}: {b:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn expand_contract_flow_is_radial() {
    let params = SampleParamsInner {
        class: MotionClass::ExpandContract,
        shape: render::ShapeKind::Disc,
        radius: 8.0,
        speed: 0.0,
        start: (32.0, 32.0),
        orbit_radius: 0.0,
        phase: 0.0,
        pulse_amp: 0.3,
        actor_color: [0.9, 0.9, 0.1],
        bg_seed: 1,
        bg_tint: [1.0, 1.0, 1.0],
        bg_blur: 2,
        bg_range: (0.1, 0.6),
    };
    let r = render_video(&params, 3);
    let plane = SIDE * SIDE;
    // first pair: radius grows; flow points away from the center
    let u = &r.flow[..plane];
    let v = &r.flow[plane..2 * plane];
    let mut checked = 0;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let i = y * SIDE + x;
            if u[i] != 0.0 || v[i] != 0.0 {
                let dx = x as f32 + 0.5 - 32.0;
                let dy = y as f32 + 0.5 - 32.0;
                let dot = dx * u[i] + dy * v[i];
                if dx * dx + dy * dy > 1.0 {
                    assert!(dot > 0.0, "flow not radial at ({x},{y})");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 50);
}

#[test]
fn sample_seed_is_order_free() {
    assert_eq!(sample_seed(1, 2, 3), sample_seed(1, 2, 3));
    assert_ne!(sample_seed(1, 2, 3), sample_seed(1, 2, 4));
    assert_ne!(sample_seed(1, 2, 3), sample_seed(2, 2, 3));
}
