//! Property-based round-trip checks for the on-disk formats.

use proptest::prelude::*;

use jigsawhsi::config::parse_config;
use jigsawhsi::graph::{build, load_checkpoint, save_checkpoint, Model, NetworkSpec};
use jigsawhsi::io::{
    read_cube, read_labels, write_cube, write_labels, HsiCube, LabelRaster,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cube_write_read_is_identity(
        h in 1usize..6,
        w in 1usize..6,
        b in 1usize..5,
        seed in 0u64..1000,
    ) {
        let n = h * w * b;
        let data: Vec<f32> = (0..n)
            .map(|i| ((i as u64).wrapping_mul(seed + 1) % 10_000) as f32 / 100.0 - 50.0)
            .collect();
        let cube = HsiCube::new(h, w, b, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hdr");
        write_cube(&cube, &path).unwrap();
        prop_assert_eq!(read_cube(&path).unwrap(), cube);
    }

    #[test]
    fn labels_write_read_is_identity(
        h in 1usize..8,
        w in 1usize..8,
        seed in 0u64..1000,
    ) {
        let labels: Vec<u16> = (0..h * w)
            .map(|i| (((i as u64).wrapping_mul(seed + 3)) % 7) as u16)
            .collect();
        // Guarantee at least one labeled pixel.
        let mut labels = labels;
        labels[0] = 1;
        let raster = LabelRaster::new(h, w, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.hdr");
        write_labels(&raster, &path).unwrap();
        prop_assert_eq!(read_labels(&path).unwrap(), raster);
    }

    #[test]
    fn checkpoint_save_load_is_identity(
        seed in 0u64..500,
        branch_units in 1usize..4,
        crop in any::<bool>(),
    ) {
        let spec = NetworkSpec {
            input_size: 5,
            input_channels: 2,
            hsi_filters: None,
            module_a: vec![],
            max_filter_size: 3,
            branch_units,
            nin_before: None,
            nin_after: None,
            avg_pool_size: 2,
            crop_enabled: crop,
            dense_units: (6, 5),
            dropout_rate: 0.25,
            l2_coeff: 1e-4,
            num_classes: 3,
        };
        let model: Model<f32> = build(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        prop_assert_eq!(loaded, model);
    }

    #[test]
    fn config_parse_serialize_parse_is_stable(
        window in 2usize..8,
        filter in 1usize..3,
        seed in 0u64..10_000,
        batch in 1usize..200,
        dropout in 0.0f64..0.9,
    ) {
        let window_size = 2 * window + 1;
        let filter_size = 2 * filter + 1;
        prop_assume!(filter_size < window_size);
        let text = format!(
            "cube = a.hdr\nlabels = b.hdr\nwindow_size = {window_size}\n\
             filter_size = {filter_size}\nseed = {seed}\nbatch_size = {batch}\n\
             dropout = {dropout}\n"
        );
        let a = parse_config(&text).unwrap();
        let b = parse_config(&a.serialize()).unwrap();
        prop_assert_eq!(&a, &b);
        let c = parse_config(&b.serialize()).unwrap();
        prop_assert_eq!(&b, &c);
    }
}
