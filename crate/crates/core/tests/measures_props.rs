use proptest::prelude::*;
use sharpcam::gradcam::CamMap;
use sharpcam::measures::{cam_dispersion, cam_ellipsoidal_area, cam_entropy, measure_all, normalize_map};

fn map(h: usize, w: usize, v: Vec<f64>) -> CamMap {
    CamMap::new(h, w, v).unwrap()
}

fn one_hot(h: usize, w: usize, at: usize, value: f64) -> CamMap {
    let mut v = vec![0.0; h * w];
    v[at] = value;
    map(h, w, v)
}

#[test]
fn uniform_and_one_hot_entropy() {
    for (h, w) in [(1, 2), (2, 2), (3, 3), (4, 4), (7, 5)] {
        let u = cam_entropy(&map(h, w, vec![0.37; h * w]));
        assert!((u - ((h * w) as f64).ln()).abs() <= 1e-10);
        for at in [0, h * w - 1] {
            assert!(cam_entropy(&one_hot(h, w, at, 2.5)).abs() <= 1e-10);
        }
    }
    let half = cam_entropy(&map(2, 2, vec![0.5, 0.5, 0.0, 0.0]));
    assert!((half - 2f64.ln()).abs() <= 1e-10);
}

#[test]
fn normalization_examples() {
    let n = normalize_map(&map(2, 2, vec![2.0, 2.0, 0.0, 0.0]));
    assert!(!n.degenerate);
    for (a, b) in n.values.iter().zip([0.5, 0.5, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    let z = normalize_map(&map(2, 3, vec![0.0; 6]));
    assert!(z.degenerate);
    assert!(z.values.iter().all(|&v| v == 1.0 / 6.0));
}

#[test]
fn ellipsoidal_area_examples() {
    let u = cam_ellipsoidal_area(&map(3, 3, vec![1.0; 9]));
    assert!((u - 2.0 / 3.0).abs() <= 1e-10);
    assert_eq!(cam_ellipsoidal_area(&one_hot(3, 3, 4, 1.0)), 0.0);
    let mut diag = vec![0.0; 9];
    diag[0] = 0.5;
    diag[8] = 0.5;
    assert!(cam_ellipsoidal_area(&map(3, 3, diag)).abs() <= 1e-10);
}

#[test]
fn dispersion_examples() {
    for n in [2usize, 4, 9, 16] {
        let cd = cam_dispersion(&one_hot(1, n, n / 2, 3.3));
        assert!((cd - (n as f64 - 1.0)).abs() <= 1e-10);
    }
    assert!((cam_dispersion(&map(1, 2, vec![1.0, 3.0])) - 0.25).abs() <= 1e-15);
    assert_eq!(cam_dispersion(&map(2, 2, vec![0.8; 4])), 0.0);
}

#[test]
fn degenerate_map_takes_uniform_values() {
    let r = measure_all(&map(3, 3, vec![0.0; 9]));
    assert!(r.degenerate);
    assert!((r.ce - 9f64.ln()).abs() <= 1e-10);
    assert!((r.ca - 2.0 / 3.0).abs() <= 1e-10);
    assert_eq!(r.cd, 0.0);
}

fn gaussian_bump(size: usize, sigma: f64) -> CamMap {
    let c = (size as f64 - 1.0) / 2.0;
    let v = (0..size * size)
        .map(|k| {
            let (i, j) = ((k / size) as f64, (k % size) as f64);
            (-((i - c).powi(2) + (j - c).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    map(size, size, v)
}

#[test]
fn shrinking_bumps_concentrate() {
    let widths = [4.0, 3.0, 2.0, 1.5, 1.0, 0.7, 0.5];
    let records: Vec<_> = widths.iter().map(|&s| measure_all(&gaussian_bump(9, s))).collect();
    for pair in records.windows(2) {
        assert!(pair[1].ce < pair[0].ce, "{pair:?}");
        assert!(pair[1].ca < pair[0].ca, "{pair:?}");
        assert!(pair[1].cd > pair[0].cd, "{pair:?}");
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

fn arb_map() -> impl Strategy<Value = CamMap> {
    (1usize..7, 2usize..7).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop_oneof![3 => 0.0f64..1.0, 1 => Just(0.0)], h * w)
            .prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-3)
            .prop_map(move |v| map(h, w, v))
    })
}

/// Maps whose mass stays far above the 1e-12 normalization constant even after
/// scaling by 1e-3.
fn heavy_map() -> impl Strategy<Value = CamMap> {
    arb_map().prop_filter("mass", |m| m.values().iter().sum::<f64>() >= 2.0)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn measures_are_scale_invariant(m in heavy_map(), c in prop_oneof![Just(1e-3), Just(1.0), Just(1e3), 1e-3f64..1e3]) {
        let scaled = map(m.height(), m.width(), m.values().iter().map(|v| v * c).collect());
        let (a, b) = (measure_all(&m), measure_all(&scaled));
        prop_assert!(close(a.ce, b.ce, 1e-9), "ce {} {}", a.ce, b.ce);
        prop_assert!(rel_close(a.ca, b.ca, 1e-10), "ca {} {}", a.ca, b.ca);
        prop_assert!(rel_close(a.cd, b.cd, 1e-10), "cd {} {}", a.cd, b.cd);
    }

    #[test]
    fn entropy_is_bounded(m in arb_map()) {
        let ce = cam_entropy(&m);
        let n = (m.height() * m.width()) as f64;
        prop_assert!(ce >= 0.0 && ce <= n.ln() + 1e-12);
        prop_assert!(cam_ellipsoidal_area(&m) >= 0.0);
        prop_assert!(cam_dispersion(&m) >= 0.0);
    }

    #[test]
    fn area_is_translation_invariant(m in arb_map(), di in 0usize..4, dj in 0usize..4) {
        let (h, w) = (m.height(), m.width());
        let (hh, ww) = (h + 4, w + 4);
        let place = |oi: usize, oj: usize| {
            let mut v = vec![0.0; hh * ww];
            for i in 0..h {
                for j in 0..w {
                    v[(i + oi) * ww + j + oj] = m.get(i, j);
                }
            }
            map(hh, ww, v)
        };
        let a = cam_ellipsoidal_area(&place(0, 0));
        let b = cam_ellipsoidal_area(&place(di, dj));
        prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        prop_assert!((a - cam_ellipsoidal_area(&m)).abs() <= 1e-10);
    }

    #[test]
    fn normalized_maps_sum_to_one(m in heavy_map()) {
        let n = normalize_map(&m);
        prop_assert!((n.values.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalized_mass_is_sum_over_sum_plus_eps(m in arb_map()) {
        let s: f64 = m.values().iter().sum();
        let total: f64 = normalize_map(&m).values.iter().sum();
        prop_assert!((total - s / (s + 1e-12)).abs() <= 1e-14);
    }
}
