use kdp_driveworld::geometry::{Obb, Segment, Vec2};
use kdp_driveworld::lidar::beam_angle;
use kdp_driveworld::{lidar_scan, LIDAR_RANGE, N_BEAMS};
use proptest::prelude::*;

/// Ray against a rectangle by slab clipping in the rectangle's own frame.
fn slab_distance(origin: Vec2, dir: Vec2, b: &Obb) -> Option<f64> {
    let o = (origin - b.center).rotate(-b.heading);
    let d = dir.rotate(-b.heading);
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (oc, dc, h) in [(o.x, d.x, b.half_length), (o.y, d.y, b.half_width)] {
        if dc.abs() < 1e-300 {
            if oc.abs() > h {
                return None;
            }
            continue;
        }
        let (a, c) = ((-h - oc) / dc, (h - oc) / dc);
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    if t1 < t0 || t1 < 0.0 {
        return None;
    }
    Some(if t0 >= 0.0 { t0 } else { t1 })
}

#[test]
fn empty_world_reads_full_range() {
    let scan = lidar_scan(Vec2::new(4.0, -1.0), 0.3, &[], &[]);
    assert_eq!(scan.len(), N_BEAMS);
    assert!(scan.iter().all(|&r| r == 1.0));
}

#[test]
fn wall_dead_ahead() {
    let wall = Segment::new(Vec2::new(25.0, -10.0), Vec2::new(25.0, 10.0));
    let scan = lidar_scan(Vec2::default(), 0.0, &[wall], &[]);
    assert_eq!(scan[0], 0.5);
    assert_eq!(scan[N_BEAMS / 2], 1.0);
}

#[test]
fn rectangle_hits_match_slab_oracle() {
    let boxes = [
        Obb::new(Vec2::new(12.0, 3.0), 0.4, 4.5, 1.8),
        Obb::new(Vec2::new(-7.0, -9.0), -1.2, 4.5, 1.8),
        Obb::new(Vec2::new(0.5, 20.0), 2.0, 10.0, 1.0),
    ];
    let origin = Vec2::new(0.3, -0.2);
    let heading = 0.25;
    let scan = lidar_scan(origin, heading, &[], &boxes);
    let mut hits = 0;
    for (k, &r) in scan.iter().enumerate() {
        let dir = Vec2::from_angle(heading + beam_angle(k));
        let want = boxes
            .iter()
            .filter_map(|b| slab_distance(origin, dir, b))
            .fold(LIDAR_RANGE, f64::min);
        assert!((r * LIDAR_RANGE - want).abs() < 1e-9, "beam {k}: {} vs {want}", r * LIDAR_RANGE);
        if want < LIDAR_RANGE {
            hits += 1;
        }
    }
    assert!(hits > 10);
}

fn mirror(p: Vec2, origin: Vec2, heading: f64) -> Vec2 {
    let local = (p - origin).rotate(-heading);
    origin + Vec2::new(local.x, -local.y).rotate(heading)
}

fn point() -> impl Strategy<Value = Vec2> {
    (-60.0f64..60.0, -60.0f64..60.0).prop_map(|(x, y)| Vec2::new(x, y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mirrored_world_reverses_the_scan(
        heading in -3.0f64..3.0,
        segs in prop::collection::vec((point(), point()), 0..8),
        boxes in prop::collection::vec((point(), -3.0f64..3.0, 1.0f64..6.0, 0.5f64..3.0), 0..6),
    ) {
        let origin = Vec2::new(1.0, 2.0);
        let segs: Vec<Segment> = segs.into_iter().filter(|(a, b)| a.dist(*b) > 0.1).map(|(a, b)| Segment::new(a, b)).collect();
        let boxes: Vec<Obb> = boxes
            .into_iter()
            .map(|(c, h, l, w)| Obb::new(c, h, l, w))
            .filter(|b| !b.contains(origin))
            .collect();
        let m_segs: Vec<Segment> = segs.iter().map(|s| Segment::new(mirror(s.a, origin, heading), mirror(s.b, origin, heading))).collect();
        let m_boxes: Vec<Obb> = boxes
            .iter()
            .map(|b| Obb { center: mirror(b.center, origin, heading), heading: 2.0 * heading - b.heading, ..*b })
            .collect();
        let a = lidar_scan(origin, heading, &segs, &boxes);
        let b = lidar_scan(origin, heading, &m_segs, &m_boxes);
        for k in 0..N_BEAMS {
            let j = (N_BEAMS - k) % N_BEAMS;
            prop_assert!((a[k] - b[j]).abs() < 1e-9, "beam {} vs {}: {} {}", k, j, a[k], b[j]);
        }
    }

    #[test]
    fn readings_are_normalized(origin in point(), heading in -3.2f64..3.2, segs in prop::collection::vec((point(), point()), 0..10)) {
        let segs: Vec<Segment> = segs.into_iter().map(|(a, b)| Segment::new(a, b)).collect();
        for r in lidar_scan(origin, heading, &segs, &[]) {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
