use std::f64::consts::PI;

use layoutdiff_core::angle::{decode_angle, encode_angle, wrap_angle};
use layoutdiff_core::generator::{generate_indexed, worst_support_gap, RoomType};
use layoutdiff_core::geometry::{box_iou, footprint_corners};
use layoutdiff_core::iou::{training_loss, LossInputs};
use layoutdiff_core::plausibility::{plausibility, PlausibilityThresholds};
use layoutdiff_core::raster::{rasterize, Plane, RasterOptions};
use layoutdiff_core::relations::{Relation, RelationThresholds};
use layoutdiff_core::scene::{FILTER_PRIMARY, FILTER_SECONDARY};
use layoutdiff_core::{
    decode_layout, encode_layout, split_scene, Caps, CategoryTaxonomy, DiffusionSchedule, Frame,
    ObjectRecord, RoomMask, Scene, SceneGraph, Tier,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn object(num_real: usize) -> impl Strategy<Value = ObjectRecord> {
    (
        0..num_real,
        prop::array::uniform3(-1.0f64..1.0),
        prop::array::uniform3(0.01f64..0.5),
        -PI + 1e-9..PI,
    )
        .prop_map(|(c, t, s, th)| ObjectRecord::new(c, t, s, th))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn split_is_a_partition(objs in prop::collection::vec(object(22), 0..40)) {
        let tax = CategoryTaxonomy::desk();
        let (p, s) = split_scene(&objs, &tax).unwrap();
        prop_assert_eq!(p.len() + s.len(), objs.len());
        prop_assert!(p.iter().all(|o| tax.is_primary(o.class)));
        prop_assert!(s.iter().all(|o| !tax.is_primary(o.class)));
        let expected_p: Vec<_> = objs.iter().filter(|o| tax.is_primary(o.class)).copied().collect();
        prop_assert_eq!(p, expected_p);
    }

    #[test]
    fn encode_then_decode_is_identity(objs in prop::collection::vec(object(22), 0..12)) {
        let tax = CategoryTaxonomy::desk();
        let caps = Caps::new(12, 32);
        let layout = encode_layout(&objs, Tier::Primary, caps, &tax).unwrap();
        let back = decode_layout(&layout);
        prop_assert_eq!(back.degenerate_orientations, 0);
        prop_assert_eq!(back.objects.len(), objs.len());
        for (a, b) in objs.iter().zip(&back.objects) {
            prop_assert_eq!(a.class, b.class);
            prop_assert_eq!(a.translation, b.translation);
            prop_assert_eq!(a.half_size, b.half_size);
            prop_assert!(close(wrap_angle(a.theta - b.theta), 0.0, 1e-12));
        }
        // and back again: the re-encoded tensor matches the first one
        let again = encode_layout(&back.objects, Tier::Primary, caps, &tax).unwrap();
        for (x, y) in layout.values().iter().zip(again.values()) {
            prop_assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn normalization_is_an_affine_bijection(
        o in object(22),
        center in prop::array::uniform3(-20.0f64..20.0),
        scale in 0.1f64..20.0,
    ) {
        let f = Frame { center, scale };
        let n = f.to_normalized(&o);
        let w = f.to_world(&n);
        for k in 0..3 {
            prop_assert!(close(n.translation[k], (o.translation[k] - center[k]) / scale, 1e-14));
            prop_assert!(close(w.translation[k], o.translation[k], 1e-12));
            prop_assert!(close(w.half_size[k], o.half_size[k], 1e-12));
        }
        prop_assert_eq!(n.theta, o.theta);
        prop_assert_eq!(n.class, o.class);
    }

    #[test]
    fn angle_round_trip(theta in -PI + 1e-9..PI) {
        let d = decode_angle(encode_angle(theta));
        prop_assert!(!d.degenerate);
        prop_assert!((d.theta - theta).abs() < 1e-12);
    }

    #[test]
    fn angle_decode_ignores_scale(theta in -PI + 1e-9..PI, r in 0.01f64..100.0) {
        let [c, s] = encode_angle(theta);
        let d = decode_angle([c * r, s * r]);
        prop_assert!((d.theta - theta).abs() < 1e-9);
    }

    #[test]
    fn filter_rule_is_strict_twenty_and_hundred(p in 0usize..40, s in 0usize..200) {
        let wide = Caps::new(1000, 1000);
        prop_assert_eq!(wide.admits(p, s), p < FILTER_PRIMARY && s < FILTER_SECONDARY);
        let tight = Caps::new(12, 32);
        prop_assert_eq!(tight.admits(p, s), p <= 12 && s <= 32);
    }

    #[test]
    fn mse_term_is_invariant_to_joint_slot_permutation(
        seed in any::<u64>(),
        perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 23;
        let dim = c + 8;
        let slots = 6;
        let mk = |rng: &mut ChaCha8Rng| (0..slots * dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (v_hat, v_true, x_t) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let mask: Vec<f64> = (0..slots).map(|i| (i % 3 != 0) as u8 as f64).collect();
        let ones = vec![1.0; slots];
        let permute = |v: &[f64]| perm.iter().flat_map(|&i| v[i * dim..(i + 1) * dim].to_vec()).collect::<Vec<f64>>();
        let permute_slots = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let base = LossInputs {
            v_hat: &v_hat, v_true: &v_true, x_t: &x_t, coefficients: (0.6, 0.8),
            num_classes: c, loss_mask: &mask, occupancy: &ones,
        };
        let (pv, pt, px, pm) = (permute(&v_hat), permute(&v_true), permute(&x_t), permute_slots(&mask));
        let moved = LossInputs { v_hat: &pv, v_true: &pt, x_t: &px, loss_mask: &pm, ..base };
        let (a, _) = training_loss(&base, 0.5, 50.0);
        let (b, _) = training_loss(&moved, 0.5, 50.0);
        prop_assert!(close(a.mse, b.mse, 1e-12));
        prop_assert!(close(a.iou, b.iou, 1e-12));
    }

    #[test]
    fn raster_is_translation_covariant(
        boxes in prop::collection::vec((4i32..40, 4i32..40, 4i32..40, 1i32..12, 1i32..12, 1i32..12, -0.2f64..0.2), 1..6),
        plane_id in 0usize..3,
    ) {
        // Box faces sit at least 0.3 pixel from any pixel center so one-pixel
        // shifts never straddle a sampling point.
        let r = 64usize;
        let px = 2.0 / r as f64;
        let plane = [Plane::XZ, Plane::XY, Plane::YZ][plane_id];
        let col_axis = match plane { Plane::YZ => 2, _ => 0 };
        let coord = |k: i32, jitter: f64| -1.0 + (k as f64 + jitter) * px;
        let objs: Vec<ObjectRecord> = boxes.iter().map(|&(x, y, z, w, h, d, j)| {
            let lo = [coord(x, j), coord(y, j), coord(z, j)];
            let hi = [coord(x + w, j), coord(y + h, j), coord(z + d, j)];
            let t = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
            let s = [(hi[0] - lo[0]) / 2.0, (hi[1] - lo[1]) / 2.0, (hi[2] - lo[2]) / 2.0];
            ObjectRecord::new(0, t, s, 0.0)
        }).collect();
        let shifted: Vec<ObjectRecord> = objs.iter().map(|o| {
            let mut o = *o;
            o.translation[col_axis] += px;
            o
        }).collect();
        let opts = RasterOptions { resolution: r, counts: true, oriented: true };
        let a = rasterize(&objs, plane, opts);
        let b = rasterize(&shifted, plane, opts);
        for row in 0..r {
            prop_assert_eq!(b.get(row, 0), 0);
            for col in 1..r {
                prop_assert_eq!(b.get(row, col), a.get(row, col - 1));
            }
        }
    }
}

#[test]
fn generated_scenes_satisfy_their_construction_rules() {
    let tax = CategoryTaxonomy::desk();
    let th = RelationThresholds::default();
    for i in 0..60u64 {
        let g = generate_indexed(i, 11, &RoomType::ALL, Caps::new(12, 32), &tax).unwrap();
        let s = &g.scene;
        let normalized: Vec<ObjectRecord> =
            s.primary.iter().map(|o| s.frame.to_normalized(o)).collect();
        for a in 0..s.primary.len() {
            for b in a + 1..s.primary.len() {
                assert_eq!(
                    box_iou(&s.primary[a], &s.primary[b]),
                    0.0,
                    "scene {i}: primaries {a},{b} overlap"
                );
            }
        }
        assert!(
            worst_support_gap(s) <= 1e-3,
            "scene {i}: support gap {}",
            worst_support_gap(s)
        );
        s.graph.validate().unwrap();
        assert_eq!(s.graph.vertices, SceneGraph::vertices_for(&s.primary));
        for e in &s.graph.edges {
            assert!(e.src < s.primary.len() && e.dst < s.primary.len());
            let rel = Relation::from_id(e.relation).unwrap();
            assert!(
                th.holds(rel, &s.primary[e.src], &s.primary[e.dst]),
                "scene {i}: edge {e:?} false"
            );
        }
        // tiers recorded at creation agree with the taxonomy split
        for (o, tier) in &g.created {
            assert_eq!(tax.tier_of(o.class).unwrap(), *tier);
        }
        let created_p: Vec<ObjectRecord> = g
            .created
            .iter()
            .filter(|(_, t)| *t == Tier::Primary)
            .map(|(o, _)| *o)
            .collect();
        let created_s: Vec<ObjectRecord> = g
            .created
            .iter()
            .filter(|(_, t)| *t == Tier::Secondary)
            .map(|(o, _)| *o)
            .collect();
        assert_eq!(created_p, s.primary);
        assert_eq!(created_s, s.secondary);
        let all: Vec<ObjectRecord> = s.objects().copied().collect();
        assert_eq!(
            split_scene(&all, &tax).unwrap(),
            (s.primary.clone(), s.secondary.clone())
        );
        assert!(s.primary.len() < FILTER_PRIMARY && s.secondary.len() < FILTER_SECONDARY);
        assert!(normalized
            .iter()
            .all(|o| o.translation.iter().all(|v| v.abs() <= 1.0)));
    }
}

#[test]
fn generation_is_a_pure_function_of_its_inputs() {
    let tax = CategoryTaxonomy::desk();
    for i in 0..10 {
        let a = generate_indexed(i, 5, &RoomType::ALL, Caps::new(12, 32), &tax).unwrap();
        let b = generate_indexed(i, 5, &RoomType::ALL, Caps::new(12, 32), &tax).unwrap();
        assert_eq!(a, b);
    }
    let a = generate_indexed(0, 5, &RoomType::ALL, Caps::new(12, 32), &tax).unwrap();
    let b = generate_indexed(0, 6, &RoomType::ALL, Caps::new(12, 32), &tax).unwrap();
    assert_ne!(a.scene, b.scene);
}

#[test]
fn schedule_endpoints_and_monotonicity() {
    let s = DiffusionSchedule::default_linear();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.beta(1), 1e-4);
    assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    assert_eq!(s.alpha_bar(1), 0.9999);
    for t in 2..=1000 {
        assert!(s.beta(t) > s.beta(t - 1));
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
}

// Independent plausibility checker: explicit corner AABBs, explicit mask
// lookups, direct support search.

fn corner_aabb(o: &ObjectRecord) -> ([f64; 3], [f64; 3]) {
    let corners = footprint_corners(o);
    let xs = corners.iter().map(|c| c[0]);
    let zs = corners.iter().map(|c| c[1]);
    let lo = [
        xs.clone().fold(f64::INFINITY, f64::min),
        o.bottom(),
        zs.clone().fold(f64::INFINITY, f64::min),
    ];
    let hi = [
        xs.fold(f64::NEG_INFINITY, f64::max),
        o.top(),
        zs.fold(f64::NEG_INFINITY, f64::max),
    ];
    (lo, hi)
}

fn brute_iou(a: &ObjectRecord, b: &ObjectRecord) -> f64 {
    let (alo, ahi) = corner_aabb(a);
    let (blo, bhi) = corner_aabb(b);
    let mut inter = 1.0;
    let mut va = 1.0;
    let mut vb = 1.0;
    for k in 0..3 {
        inter *= (ahi[k].min(bhi[k]) - alo[k].max(blo[k])).max(0.0);
        va *= ahi[k] - alo[k];
        vb *= bhi[k] - blo[k];
    }
    inter / (va + vb - inter)
}

fn mask_at(mask: &RoomMask, x: f64, z: f64) -> bool {
    if !(-1.0..1.0).contains(&x) || !(-1.0..1.0).contains(&z) {
        return false;
    }
    let col = ((x + 1.0) / 2.0 * mask.width as f64).floor() as usize;
    let row = ((z + 1.0) / 2.0 * mask.height as f64).floor() as usize;
    mask.cells[row.min(mask.height - 1) * mask.width + col.min(mask.width - 1)] == 1
}

fn brute_oob(s: &Scene, o: &ObjectRecord, shrink: f64) -> bool {
    let n = s.frame.to_normalized(o);
    let (cx, cz) = (n.translation[0], n.translation[2]);
    let mut points = vec![(cx, cz)];
    for c in footprint_corners(&n) {
        points.push((c[0] + (cx - c[0]) * shrink, c[1] + (cz - c[1]) * shrink));
    }
    points.iter().any(|&(x, z)| !mask_at(&s.room_mask, x, z))
}

fn brute_supported(s: &Scene, o: &ObjectRecord, gap: f64) -> bool {
    if o.bottom().abs() <= gap {
        return true;
    }
    let (lo, hi) = corner_aabb(o);
    s.primary.iter().any(|p| {
        let (plo, phi) = corner_aabb(p);
        let overlap = [0, 2]
            .iter()
            .all(|&k| hi[k].min(phi[k]) - lo[k].max(plo[k]) > 0.0);
        overlap && (o.bottom() - p.top()).abs() <= gap
    })
}

fn random_scene(rng: &mut ChaCha8Rng, tax: &CategoryTaxonomy, i: u64) -> Scene {
    if i % 2 == 0 {
        // a generated scene with some objects nudged off their supports
        let mut s = generate_indexed(i, 99, &RoomType::ALL, Caps::new(12, 32), tax)
            .unwrap()
            .scene;
        for o in s.secondary.iter_mut() {
            if rng.random_bool(0.3) {
                o.translation[1] += rng.random_range(-0.1..0.1);
            }
        }
        for o in s.primary.iter_mut() {
            if rng.random_bool(0.2) {
                o.translation[0] += rng.random_range(-1.0..1.0);
            }
        }
        return s;
    }
    let obj = |rng: &mut ChaCha8Rng, primary: bool| {
        let class = if primary {
            rng.random_range(0..12)
        } else {
            rng.random_range(12..22)
        };
        let s = [
            rng.random_range(0.05..0.8),
            rng.random_range(0.02..0.6),
            rng.random_range(0.05..0.8),
        ];
        let y = if rng.random_bool(0.5) {
            s[1]
        } else {
            s[1] + rng.random_range(0.0..1.0)
        };
        ObjectRecord::new(
            class,
            [rng.random_range(-3.0..3.0), y, rng.random_range(-3.0..3.0)],
            s,
            rng.random_range(-PI..PI),
        )
    };
    let n_p = rng.random_range(0..10);
    let n_s = rng.random_range(0..20);
    let primary: Vec<ObjectRecord> = (0..n_p).map(|_| obj(rng, true)).collect();
    let mut secondary: Vec<ObjectRecord> = (0..n_s).map(|_| obj(rng, false)).collect();
    // put a few secondaries exactly on primary tops
    for (k, s) in secondary.iter_mut().enumerate() {
        if let Some(p) = primary.get(k) {
            s.translation[0] = p.translation[0];
            s.translation[2] = p.translation[2];
            s.translation[1] = p.top() + s.half_size[1] + rng.random_range(-0.03..0.03);
        }
    }
    let cells: Vec<u8> = (0..64 * 64)
        .map(|k| {
            let (r, c) = (k / 64, k % 64);
            ((8..56).contains(&r) && (4..60).contains(&c) && !(r < 24 && c > 40)) as u8
        })
        .collect();
    Scene {
        graph: SceneGraph {
            vertices: SceneGraph::vertices_for(&primary),
            edges: vec![],
        },
        primary,
        secondary,
        room_mask: RoomMask::new(64, 64, cells).unwrap(),
        text: String::new(),
        source: "random".into(),
        frame: Frame {
            center: [
                rng.random_range(-1.0..1.0),
                0.0,
                rng.random_range(-1.0..1.0),
            ],
            scale: rng.random_range(2.0..5.0),
        },
    }
}

#[test]
fn plausibility_matches_brute_force_checker() {
    let tax = CategoryTaxonomy::desk();
    let th = PlausibilityThresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..50 {
        let s = random_scene(&mut rng, &tax, i);
        let objs: Vec<&ObjectRecord> = s.objects().collect();
        let mut pairs = 0;
        let mut overlapping = 0;
        let mut oob = 0;
        for a in 0..objs.len() {
            for b in a + 1..objs.len() {
                pairs += 1;
                overlapping += (brute_iou(objs[a], objs[b]) > th.overlap_iou) as usize;
            }
            oob += brute_oob(&s, objs[a], th.corner_shrink) as usize;
        }
        let unsupported = s
            .secondary
            .iter()
            .filter(|o| !brute_supported(&s, o, th.support_gap))
            .count();
        let r = plausibility(std::slice::from_ref(&s), &th);
        assert_eq!(r.pairs, pairs, "scene {i}");
        assert_eq!(r.overlapping_pairs, overlapping, "scene {i}");
        assert_eq!(r.oob_objects, oob, "scene {i}");
        assert_eq!(r.unsupported, unsupported, "scene {i}");
        assert_eq!(r.secondary_objects, s.secondary.len());
    }
}
