use num_rational::Ratio;
use pip_hsi_core::compression::*;
use pip_hsi_core::Error;
use proptest::prelude::*;

fn table_row(d_i: usize, c_o: usize, n_bits: u32) -> LayerGeometry {
    LayerGeometry::new(5, 5, 1, d_i, 3, 0, Hwd::new(1, 1, 3), c_o, n_bits)
}

#[test]
fn table_rows() {
    for (d, c_o, n, expected) in [(198, 2, 6, 8.33), (204, 2, 8, 6.25), (180, 2, 5, 10.00), (180, 4, 5, 5.00)] {
        let c = compression_factor(&table_row(d, c_o, n)).unwrap();
        assert!((c.value() - expected).abs() <= 0.01, "{d}/{c_o}/{n}: {}", c.value());
        assert!((c.value() - expected).abs() / expected <= 0.005);
    }
}

#[test]
fn output_dim_examples() {
    assert_eq!(output_dim("height", 5, 3, 0, 1).unwrap(), 3);
    assert_eq!(output_dim("depth", 198, 3, 0, 3).unwrap(), 66);
    for z in 1..50 {
        assert_eq!(output_dim("width", z, z, 0, 1).unwrap(), 1);
    }
    assert!(matches!(output_dim("width", 2, 5, 1, 1), Err(Error::KernelTooLarge { axis: "width", .. })));
}

#[test]
fn identity_layer_has_unit_factor() {
    let g = LayerGeometry::new(7, 7, 3, 11, 1, 0, Hwd::splat(1), 3, 12);
    assert_eq!(compression_factor(&g).unwrap().factor, Ratio::from_integer(1));
}

fn geometry() -> impl Strategy<Value = LayerGeometry> {
    (
        1usize..12,
        1usize..12,
        1usize..3,
        1usize..40,
        1usize..4,
        0usize..3,
        (1usize..4, 1usize..4, 1usize..4),
        1usize..8,
        1u32..13,
    )
        .prop_filter_map("kernel must fit", |(h, w, c, d, k, p, (sh, sw, sd), c_o, n)| {
            let g = LayerGeometry::new(h, w, c, d, k, p, Hwd::new(sh, sw, sd), c_o, n);
            g.output_dims().ok().map(|_| g)
        })
}

proptest! {
    #[test]
    fn factor_times_output_bits_is_input_bits(g in geometry()) {
        let c = compression_factor(&g).unwrap();
        prop_assert_eq!(c.factor * Ratio::from_integer(c.output_bits), Ratio::from_integer(c.input_bits));
        prop_assert_eq!(c.input_bits, (g.input_elements() as u64) * u64::from(g.sensor_depth));
    }

    #[test]
    fn strictly_decreasing_in_channels_and_bits(g in geometry()) {
        let base = compression_factor(&g).unwrap().factor;
        let more_channels = LayerGeometry { c_o: g.c_o + 1, ..g };
        let more_bits = LayerGeometry { n_bits: g.n_bits + 1, ..g };
        prop_assert!(compression_factor(&more_channels).unwrap().factor < base);
        prop_assert!(compression_factor(&more_bits).unwrap().factor < base);
    }

    #[test]
    fn non_increasing_in_padding(g in geometry()) {
        let base = compression_factor(&g).unwrap().factor;
        let padded = LayerGeometry { padding: Hwd::new(g.padding.h + 1, g.padding.w + 1, g.padding.d + 1), ..g };
        prop_assert!(compression_factor(&padded).unwrap().factor <= base);
    }

    #[test]
    fn as_printed_is_output_over_input_times_depth_ratio(g in geometry()) {
        let c = compression_factor(&g).unwrap();
        let out = g.output_dims().unwrap().elements() as u64;
        let inp = g.input_elements() as u64;
        let direct = Ratio::new(out, inp) * Ratio::new(u64::from(g.sensor_depth), u64::from(g.n_bits));
        prop_assert_eq!(c.as_printed, direct);
    }
}

#[test]
fn shape_oracle_matches_analytic_dims_on_1000_geometries() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 1000 {
        let k = rng.random_range(1..=4);
        let g = LayerGeometry::new(
            rng.random_range(1..=9),
            rng.random_range(1..=9),
            rng.random_range(1..=2),
            rng.random_range(1..=40),
            k,
            rng.random_range(0..=2),
            Hwd::new(rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4)),
            rng.random_range(1..=4),
            rng.random_range(1..=12),
        );
        match g.output_dims() {
            Ok(dims) => {
                assert_eq!(shape_oracle(&g).unwrap(), dims, "{g:?}");
                checked += 1;
            }
            Err(e) => assert_eq!(shape_oracle(&g).unwrap_err(), e),
        }
    }
}
