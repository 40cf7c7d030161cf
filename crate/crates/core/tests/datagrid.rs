use proptest::prelude::*;
use rainseg::datagrid::synth::{latent_from_modalities, synth_generate, SynthSpec};
use rainseg::datagrid::{
    normalize_channels, quantize_precip, read_grid, stack_modalities, stratified_split, tile_patches,
    write_grid, ChannelStats, Dataset, GridStack, LabelGrid, LpaScheme, Manifest, RasterGrid, Split,
};
use rainseg::losses::INVALID_LABEL;

const FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

fn grid_case(max: usize) -> impl Strategy<Value = (usize, usize, usize, Vec<f32>, Vec<bool>, Vec<u8>)> {
    (prop::sample::select(vec![8usize, 16, 32]), 0usize..max, 0usize..max, 1usize..4)
        .prop_flat_map(|(z, dh, dw, c)| {
            let (h, w) = (z + dh, z + dw);
            (
                Just(z),
                Just(h),
                Just(w),
                prop::collection::vec(-1e3f32..1e3, c * h * w),
                prop::collection::vec(prop::bool::weighted(0.9), h * w),
                prop::collection::vec(0u8..5, h * w),
            )
        })
        .prop_map(|(z, h, w, values, mask, labels)| (z, h, w, values, mask, labels))
}

fn stack_of(h: usize, w: usize, values: &[f32], mask: &[bool]) -> GridStack {
    let c = values.len() / (h * w);
    let grids: Vec<RasterGrid> = values
        .chunks(h * w)
        .map(|v| RasterGrid::new(h, w, 1, v.to_vec(), mask.to_vec()).unwrap())
        .collect();
    let list: Vec<_> = grids.iter().enumerate().map(|(i, g)| ("band".to_string(), i as u32, g)).collect();
    let s = stack_modalities(&list).unwrap();
    assert_eq!(s.num_channels(), c);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn untile_inverts_tile_on_valid_cells((z, h, w, values, mask, labels) in grid_case(40)) {
        let stack = stack_of(h, w, &values, &mask);
        let truth = LabelGrid::new(h, w, 5, labels).unwrap();
        let set = tile_patches(&stack, Some(&truth), z).unwrap();
        prop_assert_eq!(set.len(), h.div_ceil(z) * w.div_ceil(z));
        let back = set.untile(&set.labels, 5).unwrap();
        for cell in 0..h * w {
            let expect = if mask[cell] { truth.labels[cell] } else { INVALID_LABEL };
            prop_assert_eq!(back.labels[cell], expect);
        }
        // inputs land at the same offsets as labels
        let zz = z * z;
        for (p, &(r0, c0)) in set.origins.iter().enumerate() {
            for i in 0..z {
                for j in 0..z {
                    let (r, c) = (r0 + i, c0 + j);
                    let inside = r < h && c < w;
                    prop_assert_eq!(set.patch_mask(p)[i * z + j], inside && mask[r * w + c]);
                    if inside && mask[r * w + c] {
                        for ch in 0..stack.num_channels() {
                            prop_assert_eq!(set.input(p)[ch * zz + i * z + j], stack.channel(ch)[r * w + c]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn every_rainfall_amount_has_one_class(mm in prop_oneof![0.0f64..5_000.0, 0.0f64..1e9, Just(0.0)]) {
        for scheme in LpaScheme::all_builtin() {
            let id = scheme.classify(mm).unwrap() as usize;
            let c = &scheme.classes[id];
            prop_assert!(c.lower_mm <= mm);
            prop_assert!(c.upper_mm.is_none_or(|hi| mm < hi));
            let hits = scheme
                .classes
                .iter()
                .filter(|c| c.lower_mm <= mm && c.upper_mm.is_none_or(|hi| mm < hi))
                .count();
            prop_assert_eq!(hits, 1);
        }
    }

    #[test]
    fn split_partitions_assignable_patches((z, h, w, values, mask, labels) in grid_case(60), seed in any::<u64>()) {
        let stack = stack_of(h, w, &values, &mask);
        let truth = LabelGrid::new(h, w, 5, labels).unwrap();
        let set = tile_patches(&stack, Some(&truth), z).unwrap();
        let assignable: Vec<usize> = (0..set.len()).filter(|&p| set.labeled_cells(p) > 0).collect();
        prop_assume!(assignable.len() >= 3);
        let a = stratified_split(&set, FRACTIONS, seed).unwrap();
        prop_assert_eq!(&a, &stratified_split(&set, FRACTIONS, seed).unwrap());
        let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&s| a.indices(s)).collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &assignable);
        let n = assignable.len() as f64;
        for (s, f) in Split::ALL.iter().zip(FRACTIONS) {
            prop_assert!((a.indices(*s).len() as f64 - f * n).abs() <= 1.0 + 1e-9);
        }
        // per-class buckets within one patch of their ideal share
        for class in 0..5u8 {
            let bucket: Vec<usize> = assignable.iter().copied().filter(|&p| a.majority[p] == Some(class)).collect();
            for (s, f) in Split::ALL.iter().zip(FRACTIONS) {
                let got = bucket.iter().filter(|&&p| a.assignment[p] == Some(*s)).count() as f64;
                prop_assert!((got - f * bucket.len() as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn normalizing_twice_with_identity_changes_nothing((_z, h, w, values, mask, _l) in grid_case(10)) {
        let stack = stack_of(h, w, &values, &mask);
        prop_assume!(mask.iter().any(|&m| m));
        let (once, stats) = normalize_channels(&stack, None).unwrap();
        let (again, _) = normalize_channels(&stack, Some(&stats)).unwrap();
        let (twice, _) = normalize_channels(&once, Some(&ChannelStats::identity(stack.num_channels()))).unwrap();
        for ((a, b), c) in once.values.iter().zip(&again.values).zip(&twice.values) {
            prop_assert!((a - b).abs() <= 1e-6 && (a - c).abs() <= 1e-6);
        }
    }

    #[test]
    fn mgrid_round_trip(h in 1usize..12, w in 1usize..12, c in 1usize..3, seed in any::<u64>()) {
        let values: Vec<f32> = (0..c * h * w)
            .map(|i| if (seed >> (i % 64)) & 1 == 1 { i as f32 * 0.25 - 3.0 } else { f32::NAN })
            .collect();
        let g = RasterGrid::from_values(h, w, c, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.mgrid");
        write_grid(&g, &path).unwrap();
        let back = read_grid(&path).unwrap();
        prop_assert_eq!(&back.mask, &g.mask);
        let cells = h * w;
        for (i, (a, b)) in back.values.iter().zip(&g.values).enumerate() {
            if g.mask[i % cells] {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            } else {
                prop_assert!(a.is_nan());
            }
        }
    }
}

#[test]
fn sixty_five_rows_pad_into_six_patches() {
    let (h, w) = (65, 64);
    let stack = stack_of(h, w, &vec![1.0; h * w], &vec![true; h * w]);
    let set = tile_patches(&stack, None, 32).unwrap();
    assert_eq!(set.len(), 6);
    let padded_rows = (0..32).filter(|&i| !set.patch_mask(4)[i * 32]).count();
    assert_eq!(padded_rows, 31);
}

#[test]
fn default_scene_histogram_is_frozen() {
    let s = synth_generate(&SynthSpec::default(), 42).unwrap();
    let h = quantize_precip(&s.rain, &s.scheme).unwrap().histogram();
    assert_eq!(h, vec![13107, 13107, 13108, 13107, 13107]);
    let n: u64 = h.iter().sum();
    assert!(h.iter().all(|&c| c as f64 >= 0.05 * n as f64));
}

#[test]
fn imbalanced_scene_has_a_rare_class() {
    let s = synth_generate(&SynthSpec::imbalanced(), 42).unwrap();
    let h = quantize_precip(&s.rain, &s.scheme).unwrap().histogram();
    let n: u64 = h.iter().sum();
    assert!((h[0] as f64) <= 0.03 * n as f64 && h[0] > 0);
}

#[test]
fn labels_are_a_threshold_rule_on_the_inputs() {
    let s = synth_generate(&SynthSpec::tiny(), 9).unwrap();
    let labels = quantize_precip(&s.rain, &s.scheme).unwrap();
    let latent = latent_from_modalities(&s.modalities).unwrap();
    for (a, b) in latent.iter().zip(&s.latent) {
        assert!((a - b).abs() < 1e-5);
    }
    let mut order: Vec<usize> = (0..latent.len()).collect();
    order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]));
    assert!(order.windows(2).all(|w| labels.labels[w[0]] <= labels.labels[w[1]]));
}

#[test]
fn manifest_round_trip_keeps_channel_order() {
    let scene = synth_generate(&SynthSpec { height: 40, width: 24, ..SynthSpec::default() }, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = Manifest::write_synth(&scene, dir.path()).unwrap();
    let read = Manifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(written, read);
    let ds = Dataset::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(ds.stack.channels, read.channel_table());
    assert_eq!(ds.stack.channel_index("humidity", 7), Some(4 * 3 + 1));
    let labels = quantize_precip(&scene.rain, &scene.scheme).unwrap();
    assert_eq!(ds.labels.as_ref(), Some(&labels));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let spec = SynthSpec::tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Manifest::write_synth(&synth_generate(&spec, 11).unwrap(), a.path()).unwrap();
    Manifest::write_synth(&synth_generate(&spec, 11).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 23);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
}
