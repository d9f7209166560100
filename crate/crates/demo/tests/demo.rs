use nptad_demo::{lr_curve, mask_bank_view, score_heatmap, HeatmapRequest};

#[test]
fn bank_view() {
    let v = mask_bank_view(3, 2).unwrap();
    assert_eq!(v.m, "6");
    assert_eq!(v.masks, ["100", "010", "001", "110", "101", "011"]);
    let big = mask_bank_view(30, 3).unwrap();
    assert_eq!(big.m, "4525");
    assert!(big.masks.is_empty());
    assert!(mask_bank_view(3, 4).is_err());
    assert_eq!(mask_bank_view(40, 39).unwrap().m, ((1u64 << 40) - 2).to_string());
    assert!(mask_bank_view(200, 150).is_err());
}

#[test]
fn schedule() {
    let c = lr_curve(10, 0.5).unwrap();
    assert_eq!(c.len(), 10);
    assert!(c[..7].iter().all(|&x| x == 0.5));
    assert!(c[9] < c[8] && c[8] < c[7]);
}

fn request(method: &str) -> HeatmapRequest {
    HeatmapRequest {
        method: method.into(),
        normals: 60,
        contamination: 0,
        k: 5,
        epochs: 20,
        grid: 9,
        seed: 1,
    }
}

#[test]
fn heatmap_scores_ring_centre_higher_than_ring() {
    for m in ["knn", "mask-knn", "npt"] {
        let h = score_heatmap(&request(m)).unwrap();
        assert_eq!(h.scores.len(), 81);
        assert_eq!(h.points.len(), 60);
        // grid is 9x9 over [-3.5, 3.5]: index 40 is the origin, 4 is (0, -3.5)
        let centre = h.scores[40];
        let on_ring = h.scores[9 + 4]; // (0, -2.625)
        assert!(h.scores.iter().all(|s| s.is_finite()), "{m}");
        if m != "npt" {
            assert!(centre > on_ring, "{m}: {centre} vs {on_ring}");
        }
    }
    assert!(score_heatmap(&request("lof")).is_err());
}
