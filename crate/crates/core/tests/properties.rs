mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvar_core::attention::{attend_sequence, AttnParams};
use mvar_core::harness::{generate_toy_dataset, Checkpoint, ToyDataset};
use mvar_core::model::{
    build_input_sequence, forward, generate, generate_with_rejection, streaming_logits, LayerMode,
    Sampling,
};
use mvar_core::scan::{scan_sequence, scan_sequence_parallel, SsmParams};
use mvar_core::schedule::{subsample_grid, upsample_grid, Grid};
use mvar_core::tokenizer::{
    decode_multiscale, encode_multiscale, residual_energy, PatchLift,
};
use mvar_core::{Codebook, Mat, ModelConfig, ModelParams, ScaleSchedule, TokenMapPyramid, Tokenizer};

use common::{masked_attention, sides_from_steps};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn layouts_tile_exhaustively() {
    // every strictly increasing schedule starting at 1 with n <= 6, sides <= 8
    for mask in 0u32..(1 << 7) {
        let mut sides = vec![1];
        sides.extend((2..=8).filter(|s| mask & (1 << (s - 2)) != 0));
        if sides.len() > 6 {
            continue;
        }
        let layout = ScaleSchedule::new(sides.clone()).unwrap().layout();
        let mut next = 0;
        for i in 0..layout.n_blocks() {
            let r = layout.block_range(i);
            assert_eq!(r.start, next);
            assert_eq!(r.len(), sides[i] * sides[i]);
            for p in r.clone() {
                assert_eq!(layout.block_of_position(p).unwrap(), i);
            }
            next = r.end;
        }
        assert_eq!(next, layout.total_len);
        assert_eq!(layout.block_lengths.iter().sum::<usize>(), layout.total_len);
        assert!(layout.block_of_position(layout.total_len).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upsample_then_subsample_is_identity(src in 1usize..7, extra in 0usize..9, dim in 1usize..4, seed: u64) {
        let dst = src + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::<f64>::randn(src * src, dim, 1.0, &mut rng);
        let g = Grid::from_vec(src, dim, m.into_vec()).unwrap();
        let up = upsample_grid(&g, dst).unwrap();
        prop_assert_eq!(subsample_grid(&up, src).unwrap(), g);
    }

    #[test]
    fn block_diagonal_matches_masked_oracle(
        steps in prop::collection::vec(1usize..3, 0..4),
        heads_log in 0u32..3,
        seed: u64,
    ) {
        let sides = sides_from_steps(&steps);
        let layout = ScaleSchedule::new(sides).unwrap().layout();
        let heads = 1 << heads_log;
        let d = 4 * heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::<f32>::randn(layout.total_len, d, 1.0, &mut rng);
        let p = AttnParams::<f32>::init(d, heads, &mut rng);
        let got = attend_sequence(&x, &layout, &p).unwrap();
        let want = masked_attention(&x, &p, |i, j| {
            layout.block_of_position(i).unwrap() == layout.block_of_position(j).unwrap()
        });
        for (i, row) in want.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                prop_assert!(close(got.get(i, c) as f64, w, 1e-5), "({i},{c}): {} vs {w}", got.get(i, c));
            }
        }
    }

    #[test]
    fn parallel_scan_matches_sequential(l in 1usize..80, conv in prop::option::of(1usize..4), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SsmParams::<f64>::init(3, 6, 4, conv, &mut rng);
        let x = Mat::<f64>::randn(l, 3, 1.0, &mut rng);
        let a = scan_sequence(&x, &p).unwrap();
        let b = scan_sequence_parallel(&x, &p).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn residual_energy_never_increases(steps in prop::collection::vec(1usize..3, 1..4), v in 2usize..9, seed: u64) {
        let sides = sides_from_steps(&steps);
        let schedule = ScaleSchedule::new(sides).unwrap();
        let n = schedule.finest();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![vec![0.0f32; 3]];
        for _ in 1..v {
            rows.push(Mat::<f32>::randn(1, 3, 1.0, &mut rng).into_vec());
        }
        let cb = Codebook::from_rows(&rows).unwrap();
        let f = Grid::from_vec(n, 3, Mat::<f64>::randn(n * n, 3, 1.5, &mut rng).into_vec()).unwrap();
        let mut prev = f.sum_sq();
        for k in 1..=schedule.len() {
            let e = residual_energy(&f, &schedule, k, &cb).unwrap();
            prop_assert!(e <= prev + 1e-9, "prefix {k}: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn constructed_grids_round_trip(steps in prop::collection::vec(1usize..3, 0..3), seed: u64) {
        // scale i draws from two rows on its own axis with magnitude 10^(n-i),
        // so coarser choices dominate every pooled residual
        let sides = sides_from_steps(&steps);
        let schedule = ScaleSchedule::new(sides.clone()).unwrap();
        let n_scales = sides.len();
        let dim = n_scales;
        let mut rows = vec![vec![0.0f32; dim]];
        for i in 0..n_scales {
            let mag = 10f32.powi((n_scales - i) as i32 + 1);
            for k in 1..=2 {
                let mut r = vec![0.0f32; dim];
                r[i] = mag * k as f32;
                rows.push(r);
            }
        }
        let cb = Codebook::from_rows(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<Vec<u32>> = sides
            .iter()
            .enumerate()
            .map(|(i, &s)| (0..s * s).map(|_| (1 + 2 * i + rand::Rng::random_range(&mut rng, 0..2)) as u32).collect())
            .collect();
        let pyr = TokenMapPyramid::new(schedule.clone(), maps).unwrap();
        let f = decode_multiscale(&pyr, &cb).unwrap();
        let back = encode_multiscale(&f, &schedule, &cb).unwrap();
        prop_assert_eq!(&back, &pyr);
        prop_assert_eq!(decode_multiscale(&back, &cb).unwrap(), f.clone());
        prop_assert_eq!(residual_energy(&f, &schedule, n_scales, &cb).unwrap(), 0.0);
    }
}

fn small_config(mode: LayerMode, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::with_shape(ScaleSchedule::new(vec![1, 2, 3]).unwrap(), 8, 2, 6, 3);
    c.n_heads = 2;
    c.d_inner = 8;
    c.state_dim = 4;
    c.layer_modes = vec![mode, LayerMode::GlobalAttention];
    c.seed = seed;
    c
}

fn random_pyramid(config: &ModelConfig, rng: &mut ChaCha8Rng) -> TokenMapPyramid {
    let maps = config
        .schedule
        .sides()
        .iter()
        .map(|&s| (0..s * s).map(|_| rand::Rng::random_range(rng, 0..config.vocab as u32)).collect())
        .collect();
    TokenMapPyramid::new(config.schedule.clone(), maps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_blocks_never_reach_earlier_logits(seed: u64, conv in 0usize..3, block in 1usize..3) {
        let mut config = small_config(LayerMode::Decoupled, seed);
        config.conv_kernel = conv;
        let params = ModelParams::<f32>::init(&config).unwrap();
        let layout = config.schedule.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::<f32>::randn(layout.total_len, config.d, 1.0, &mut rng);
        let base = forward(&x, &layout, &params, &config).unwrap();
        let mut y = x.clone();
        for r in layout.block_range(block) {
            for v in y.row_mut(r) {
                *v += 3.0;
            }
        }
        let moved = forward(&y, &layout, &params, &config).unwrap();
        let cut = layout.block_range(block).start;
        prop_assert_eq!(base.slice_rows(0, cut), moved.slice_rows(0, cut));
        prop_assert!(base.slice_rows(cut, layout.total_len) != moved.slice_rows(cut, layout.total_len));
    }

    #[test]
    fn streaming_matches_full_forward(seed: u64, mode_global: bool, cumulative: bool) {
        let mode = if mode_global { LayerMode::GlobalAttention } else { LayerMode::Decoupled };
        let mut config = small_config(mode, seed);
        config.cumulative_input = cumulative;
        let params = ModelParams::<f32>::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let pyr = random_pyramid(&config, &mut rng);
        let x = build_input_sequence(&pyr, 1, &params, &config).unwrap();
        let full = forward(&x, &config.schedule.layout(), &params, &config).unwrap();
        let stream = streaming_logits(&pyr, 1, &params, &config).unwrap();
        prop_assert!(full.max_abs_diff(&stream) <= 1e-5);
    }

    #[test]
    fn generation_is_seeded_and_rejection_is_monotone(seed: u64) {
        let config = small_config(LayerMode::Decoupled, seed);
        let params = ModelParams::<f32>::init(&config).unwrap();
        let s = Sampling::plain(config.vocab, seed);
        let a = generate(2, &params, &config, &s).unwrap();
        prop_assert_eq!(&a, &generate(2, &params, &config, &s).unwrap());
        let lift = PatchLift::new(1, 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::new(3, Mat::<f32>::randn(config.vocab, 3, 1.0, &mut rng).into_vec()).unwrap();
        let tok = Tokenizer { schedule: config.schedule.clone(), lift, codebook: cb };
        let target = Grid::from_vec(3, 3, vec![0.5; 27]).unwrap();
        let scorer = |g: &Grid<f64>, _: usize| -> mvar_core::Result<f64> {
            let mut diff = g.clone();
            diff.sub_assign(&target);
            Ok(-diff.sum_sq())
        };
        let (one, s1) = generate_with_rejection(2, 1, &scorer, &params, &config, &tok, &s).unwrap();
        prop_assert_eq!(&one, &a);
        let (_, s8) = generate_with_rejection(2, 8, &scorer, &params, &config, &tok, &s).unwrap();
        prop_assert!(s8 >= s1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_files_round_trip(n_classes in 2usize..6, per_class in 1usize..4, quarter in 1usize..4, seed: u64) {
        let ds = generate_toy_dataset(n_classes, per_class, 4 * quarter, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mvds");
        ds.write(&path).unwrap();
        prop_assert_eq!(ToyDataset::read(&path).unwrap(), ds);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        prop_assert!(ToyDataset::read(&path).is_err());
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed: u64, layers in 0usize..3, ffn in 0usize..3, global: bool) {
        let mut config = small_config(LayerMode::Decoupled, seed);
        config.n_layers = layers;
        config.layer_modes = vec![if global { LayerMode::GlobalAttention } else { LayerMode::Decoupled }; layers];
        config.ffn_mult = ffn;
        let mut params = ModelParams::<f32>::init(&config).unwrap();
        // perturb so values are not just the seeded init
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in params.tensors_mut() {
            let noise = Mat::<f32>::randn(m.rows(), m.cols(), 1e-3, &mut rng);
            m.add_assign(&noise);
        }
        let lift = PatchLift::new(2, 4, seed).unwrap();
        let cb = Codebook::new(4, Mat::<f32>::randn(config.vocab, 4, 1.0, &mut rng).into_vec()).unwrap();
        let ck = Checkpoint {
            tokenizer: Tokenizer { schedule: config.schedule.clone(), lift, codebook: cb },
            config,
            params,
            step: seed % 1000,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mvar");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for ((_, a), (_, b)) in back.params.tensors().iter().zip(ck.params.tensors()) {
            let bits = |m: &Mat<f32>| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(back, ck);
    }
}
