use bfd_core::geometry::{pca_position, procrustes_residual};
use bfd_core::probes::{raw_dataset, train_probe, ProbeConfig};
use bfd_core::synth::{generate, planted_truth, PositionPattern, SynthConfig};
use bfd_core::{factorize, ActivationBlock, Matrix, TokenSubset};

fn layer_block(cfg: &SynthConfig, layer: usize) -> ActivationBlock {
    let out = generate(cfg).unwrap();
    let t = &out.tensors[layer];
    assert_eq!(t.name, format!("activations/layer{layer}"));
    ActivationBlock::from_f32(layer, cfg.num_images, cfg.dim, cfg.layout(), &t.data).unwrap()
}

#[test]
fn factorize_recovers_planted_factors() {
    for pattern in [PositionPattern::GridPlanar, PositionPattern::Fourier, PositionPattern::Random] {
        let cfg = SynthConfig { pattern, ..SynthConfig::default() };
        let truth = planted_truth(&cfg).unwrap();
        for layer in 0..cfg.num_layers {
            let f = factorize(&layer_block(&cfg, layer), TokenSubset::PatchOnly).unwrap();
            let planted = &truth.layers[layer];
            assert!(f.mu_position.max_abs_diff(&planted.position) <= 1e-6, "{pattern:?} layer {layer}");
            for k in 0..cfg.dim {
                assert!((f.mu_layer[k] - truth.offset[k]).abs() <= 1e-6);
            }
            let t = cfg.layout().num_tokens();
            for n in 0..cfg.num_images {
                for (j, &tok) in f.tokens.iter().enumerate() {
                    let start = (n * t + tok) * cfg.dim;
                    let expect = &planted.content[start..start + cfg.dim];
                    for k in 0..cfg.dim {
                        assert!((f.content_row(n, j)[k] - expect[k]).abs() <= 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn zero_content_scale_leaves_only_position() {
    let cfg = SynthConfig { content_scale: 0.0, ..SynthConfig::default() };
    let truth = planted_truth(&cfg).unwrap();
    let f = factorize(&layer_block(&cfg, 2), TokenSubset::PatchOnly).unwrap();
    assert!(f.content_slice().iter().all(|v| v.abs() <= 1e-6));
    assert!(f.mu_position.max_abs_diff(&truth.layers[2].position) <= 1e-6);
}

#[test]
fn grid_planar_position_is_a_flat_grid() {
    let cfg = SynthConfig::default();
    let truth = planted_truth(&cfg).unwrap();
    for layer in 0..cfg.num_layers {
        let f = factorize(&layer_block(&cfg, layer), TokenSubset::PatchOnly).unwrap();
        let e = pca_position(layer, &f.mu_position).unwrap();
        assert!(e.explained_variance[2] <= 1e-8 * e.total_variance);
        let xy = Matrix::from_fn(16, 2, |r, c| e.coords[(r, c)]);
        let planted = truth.layers[layer].grid_coords.as_ref().unwrap();
        assert!(procrustes_residual(&xy, planted).unwrap() <= 1e-6);
    }
}

#[test]
fn no_position_signal_means_chance_decoding() {
    let cfg = SynthConfig { position_scale: 0.0, ..SynthConfig::default() };
    let r = train_probe(&raw_dataset(&layer_block(&cfg, 0)), &ProbeConfig::default()).unwrap();
    let chance = 1.0 / 16.0;
    let m = (cfg.num_images * 16) as f64;
    let band = 3.0 * (chance * (1.0 - chance) / m).sqrt();
    assert!((r.accuracy - chance).abs() <= band, "accuracy {}", r.accuracy);
}

#[test]
fn desk_archive_shapes_follow_the_config() {
    let cfg = SynthConfig { num_images: 4, dim: 8, ..SynthConfig::default() };
    let out = generate(&cfg).unwrap();
    assert_eq!(out.tensors.len(), cfg.num_layers * (1 + 2 * cfg.num_heads));
    assert_eq!(out.tensors[0].shape, vec![4, 17, 8]);
    let w = out.tensors.iter().find(|t| t.name == "weights/layer3/head1/wq").unwrap();
    assert_eq!(w.shape, vec![8, 8]);
}
