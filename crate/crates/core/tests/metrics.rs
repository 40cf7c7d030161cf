use proptest::prelude::*;
use rainseg::datagrid::{stack_modalities, tile_patches, LabelGrid, RasterGrid};
use rainseg::metrics::{confusion, render_classmap, report_csv, scores, ConfusionMatrix, INVALID_COLOR, PALETTE};

const K: u8 = 5;

fn pair(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    let cell = prop_oneof![9 => 0u8..K, 1 => Just(255u8)];
    (prop::collection::vec(cell.clone(), len), prop::collection::vec(cell, len))
        .prop_map(|(mut p, mut t)| {
            p[0] = 0;
            t[0] = 0;
            (p, t)
        })
}

fn grid(h: usize, w: usize, labels: Vec<u8>) -> LabelGrid {
    LabelGrid::new(h, w, K, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn relabeling_permutes_per_class_scores((p, t) in pair(60), perm in Just((0..K).collect::<Vec<u8>>()).prop_shuffle()) {
        let map = |v: &[u8]| v.iter().map(|&c| if c == 255 { 255 } else { perm[c as usize] }).collect::<Vec<_>>();
        let a = scores(&confusion(&grid(6, 10, p.clone()), &grid(6, 10, t.clone())).unwrap()).unwrap();
        let b = scores(&confusion(&grid(6, 10, map(&p)), &grid(6, 10, map(&t))).unwrap()).unwrap();
        for c in 0..K as usize {
            prop_assert_eq!(a.per_class[c], b.per_class[perm[c] as usize]);
        }
        prop_assert_eq!(a.accuracy, b.accuracy);
        for (x, y) in [(a.macro_f1, b.macro_f1), (a.macro_precision, b.macro_precision), (a.macro_recall, b.macro_recall), (a.weighted_f1, b.weighted_f1)] {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_f1_is_bounded_by_supported_classes((p, t) in pair(80)) {
        let cm = confusion(&grid(8, 10, p), &grid(8, 10, t)).unwrap();
        let s = scores(&cm).unwrap();
        let supported: Vec<f64> = s.per_class.iter().filter(|c| c.support > 0).map(|c| c.f1).collect();
        let lo = supported.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = supported.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.weighted_f1 >= lo - 1e-12 && s.weighted_f1 <= hi + 1e-12);
        prop_assert_eq!(s.accuracy, cm.trace() as f64 / cm.total() as f64);
        prop_assert_eq!(cm.total(), s.per_class.iter().map(|c| c.support).sum::<u64>());
    }

    #[test]
    fn patchwise_pooling_equals_whole_grid((p, t) in pair(24 * 20), z in prop::sample::select(vec![8usize, 16])) {
        let (h, w) = (24, 20);
        let pred = grid(h, w, p);
        let truth = grid(h, w, t.clone());
        let whole = confusion(&pred, &truth).unwrap();

        let mask: Vec<bool> = t.iter().map(|&l| l != 255).collect();
        let g = RasterGrid::new(h, w, 1, vec![0.0; h * w], mask).unwrap();
        let stack = stack_modalities(&[("m".into(), 0, &g)]).unwrap();
        let truth_tiles = tile_patches(&stack, Some(&truth), z).unwrap();
        let pred_tiles = tile_patches(&stack, Some(&pred), z).unwrap();
        let mut pooled = ConfusionMatrix::new(K as usize);
        for i in 0..truth_tiles.len() {
            let mut part = ConfusionMatrix::new(K as usize);
            part.accumulate(pred_tiles.patch_labels(i), truth_tiles.patch_labels(i), Some(truth_tiles.patch_mask(i))).unwrap();
            pooled.merge(&part).unwrap();
        }
        prop_assert_eq!(&pooled, &whole);
        prop_assert_eq!(scores(&pooled).unwrap(), scores(&whole).unwrap());
    }

    #[test]
    fn render_is_a_palette_lookup(labels in prop::collection::vec(prop_oneof![0u8..K, Just(255u8)], 12)) {
        let g = grid(3, 4, labels.clone());
        let img = render_classmap(&g).unwrap();
        prop_assert_eq!(&img, &render_classmap(&g).unwrap());
        let header = b"P6\n4 3\n255\n";
        prop_assert_eq!(&img[..header.len()], &header[..]);
        for (i, &l) in labels.iter().enumerate() {
            let px = &img[header.len() + 3 * i..header.len() + 3 * i + 3];
            let want = if l == 255 { INVALID_COLOR } else { PALETTE[l as usize] };
            prop_assert_eq!(px, &want[..]);
        }
    }
}

#[test]
fn predicted_but_never_true_class_gets_zero_f1_and_weight() {
    let truth = grid(1, 4, vec![0, 0, 1, 1]);
    let pred = grid(1, 4, vec![0, 2, 1, 1]);
    let s = scores(&confusion(&pred, &truth).unwrap()).unwrap();
    assert_eq!(s.per_class[2].f1, 0.0);
    assert_eq!(s.per_class[2].support, 0);
    let by_hand = (0.5 * (2.0 * 0.5 / 1.5) + 0.5 * 1.0) as f64;
    assert!((s.weighted_f1 - by_hand).abs() < 1e-12);
    let csv = report_csv(&s);
    assert!(csv.contains("\nExcess,--,--,--,0\n"));
}
